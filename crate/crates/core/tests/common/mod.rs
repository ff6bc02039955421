#![allow(dead_code)]

use emovec::distill::loss::{LossWeights, UttVariant};
use emovec::distill::trainer::utterance_objective;
use emovec::distill::MaskSpec;
use emovec::model::{BackboneStyle, ModelConfig, Parameters};

pub fn toy_wave(n: usize, phase: f64) -> Vec<f32> {
    (0..n)
        .map(|t| {
            let t = t as f64;
            (0.4 * (t * 0.031 + phase).sin() + 0.2 * (t * 0.173).cos() * (t * 0.002).sin()) as f32
        })
        .collect()
}

pub struct GradCase {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub student: Parameters,
    pub teacher: Parameters,
    pub samples: Vec<f32>,
    pub mask: MaskSpec,
}

pub fn grad_case(style: BackboneStyle, variant: UttVariant) -> GradCase {
    let mut model = ModelConfig::tiny();
    model.backbone_style = style;
    model.n_utt_tokens = variant.default_tokens(3);
    let student = Parameters::init(&model, 11).unwrap();
    let teacher = Parameters::init(&model, 12).unwrap();
    let samples = toy_wave(ModelConfig::samples_for_frames(9), 0.3);
    let mask = MaskSpec::from_indices(vec![1, 2, 3, 6], 9, 0.5, 5).unwrap();
    GradCase {
        model,
        weights: LossWeights {
            variant,
            alpha: 0.7,
            frame_loss: true,
        },
        student,
        teacher,
        samples,
        mask,
    }
}

impl GradCase {
    pub fn loss(&self, student: &Parameters) -> f64 {
        utterance_objective(
            &self.samples,
            student,
            &self.teacher,
            &self.model,
            self.weights,
            &self.mask,
            5,
            false,
            None,
        )
        .unwrap()
        .0
        .total
    }

    pub fn analytic(&self) -> Parameters {
        let mut g = self.student.zeros_like();
        utterance_objective(
            &self.samples,
            &self.student,
            &self.teacher,
            &self.model,
            self.weights,
            &self.mask,
            5,
            false,
            Some((&mut g, 1.0)),
        )
        .unwrap();
        g
    }

    /// Central differences over every student value, with step `h`.
    pub fn numeric(&self, h: f64) -> Parameters {
        let mut g = self.student.zeros_like();
        let mut p = self.student.clone();
        let lens: Vec<usize> = self.student.named().into_iter().map(|(_, _, t)| t.len()).collect();
        for (a, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let orig = value(&p, a, i);
                set_value(&mut p, a, i, orig + h);
                let fp = self.loss(&p);
                set_value(&mut p, a, i, orig - h);
                let fm = self.loss(&p);
                set_value(&mut p, a, i, orig);
                set_value(&mut g, a, i, (fp - fm) / (2.0 * h));
            }
        }
        g
    }
}

fn value(p: &Parameters, array: usize, i: usize) -> f64 {
    p.named()[array].2.data[i]
}

fn set_value(p: &mut Parameters, array: usize, i: usize, v: f64) {
    p.named_mut().into_iter().nth(array).unwrap().2.data[i] = v;
}

/// `||a - n|| / max(||a||, ||n||)` per named array; arrays whose gradient is
/// zero in both are reported as 0.
pub fn relative_errors(analytic: &Parameters, numeric: &Parameters) -> Vec<(String, f64)> {
    analytic
        .named()
        .into_iter()
        .zip(numeric.named())
        .map(|((name, _, a), (_, _, n))| {
            let diff: f64 = a.data.iter().zip(&n.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = na.max(nn);
            (name, if scale < 1e-12 { diff } else { diff / scale })
        })
        .collect()
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}
