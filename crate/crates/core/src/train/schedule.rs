/// Triangular cyclic learning rate whose amplitude halves every cycle.
///
/// The rate rises linearly from `base_lr` to `max_lr` over the first half of
/// each `cycle_len`-step cycle and falls back over the second half.
pub fn cyclic_lr(step: usize, base_lr: f64, max_lr: f64, cycle_len: usize) -> f64 {
    let half = cycle_len.max(2) as f64 / 2.0;
    let cycle = (1.0 + step as f64 / (2.0 * half)).floor();
    let x = (step as f64 / half - 2.0 * cycle + 1.0).abs();
    let scale = 0.5f64.powf(cycle - 1.0);
    base_lr + (max_lr - base_lr) * (1.0 - x).max(0.0) * scale
}
