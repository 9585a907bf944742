use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore, SeededRng};
use crate::tensor::Tensor;

/// Position of a time slice within the week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeOfWeek {
    /// Monday = 0.
    pub day_of_week: usize,
    pub slot_of_day: usize,
}

/// Two affine maps with a ReLU between them.
pub(crate) fn two_layer(x: &Tensor, bound: &Bound, prefix: &str) -> Result<Tensor> {
    let h = x
        .matmul(&bound.get(&format!("{prefix}.w1"))?)?
        .add(&bound.get(&format!("{prefix}.b1"))?)?
        .relu();
    h.matmul(&bound.get(&format!("{prefix}.w2"))?)?
        .add(&bound.get(&format!("{prefix}.b2"))?)
}

pub(crate) fn register_two_layer(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    store.insert_xavier(&format!("{prefix}.w1"), d_in, d_hidden, rng)?;
    store.insert_constant(&format!("{prefix}.b1"), &[d_hidden], 0.0)?;
    store.insert_xavier(&format!("{prefix}.w2"), d_hidden, d_out, rng)?;
    store.insert_constant(&format!("{prefix}.b2"), &[d_out], 0.0)
}

/// Day-of-week one-hot (7) followed by time-of-day one-hot, `[B, T, d_te]`.
pub fn temporal_one_hot(times: &[Vec<TimeOfWeek>], slots_per_day: usize) -> Result<Tensor> {
    let batch = times.len();
    let t_len = times.first().map_or(0, Vec::len);
    let width = slots_per_day + 7;
    let mut data = vec![0.0; batch * t_len * width];
    for (b, row) in times.iter().enumerate() {
        if row.len() != t_len {
            return Err(Error::Contract("ragged time indices in batch".into()));
        }
        for (t, tw) in row.iter().enumerate() {
            if tw.day_of_week >= 7 || tw.slot_of_day >= slots_per_day {
                return Err(Error::Range {
                    what: "time slot",
                    index: tw.slot_of_day.max(tw.day_of_week),
                    len: slots_per_day,
                });
            }
            let base = (b * t_len + t) * width;
            data[base + tw.day_of_week] = 1.0;
            data[base + 7 + tw.slot_of_day] = 1.0;
        }
    }
    Tensor::new(&[batch, t_len, width], data)
}

/// Spatio-temporal embedding `[B, T, N, d]`: projected sensor embedding plus
/// projected time embedding, broadcast over the other axis.
pub fn spatio_temporal_embedding(bound: &Bound, times: &[Vec<TimeOfWeek>], slots_per_day: usize) -> Result<Tensor> {
    let se = two_layer(&bound.get("ste.se_raw")?, bound, "ste.se")?;
    let one_hot = temporal_one_hot(times, slots_per_day)?;
    let te = two_layer(&one_hot, bound, "ste.te")?;
    let (b, t, d) = (te.shape()[0], te.shape()[1], te.shape()[2]);
    te.reshape(&[b, t, 1, d])?.add(&se)
}
