use crate::error::Result;
use crate::model::{ParamGroup, Parameters};

/// Teacher update: backbone arrays move to `tau * teacher + (1 - tau) *
/// student`; extractor arrays (conv stack, feature norm and projection) are
/// copied from the student.
pub fn ema_update(teacher: &mut Parameters, student: &Parameters, tau: f64) -> Result<()> {
    teacher.zip_mut(student, |_, group, t, s| match group {
        ParamGroup::Extractor => t.data.copy_from_slice(&s.data),
        ParamGroup::Backbone => {
            for (a, &b) in t.data.iter_mut().zip(&s.data) {
                *a = tau * *a + (1.0 - tau) * b;
            }
        }
    })
}
