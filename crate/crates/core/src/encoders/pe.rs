use crate::autograd::Tensor;

/// Sinusoidal encoding of day-of-year dates, `T × width`.
///
/// Column pair `(2i, 2i+1)` holds `(sin, cos)` of `date / period^(2i/width)`.
pub fn positional_encoding(dates: &[i32], width: usize, period: f64) -> Tensor {
    let freqs: Vec<f64> = (0..width)
        .map(|j| period.powf(-((2 * (j / 2)) as f64) / width as f64))
        .collect();
    let mut out = Vec::with_capacity(dates.len() * width);
    for &d in dates {
        for (j, f) in freqs.iter().enumerate() {
            let angle = f64::from(d) * f;
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![dates.len(), width], out)
}
