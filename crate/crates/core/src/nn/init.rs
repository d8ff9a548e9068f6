/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Truncated Gaussian with std `sqrt(2 / fan_in)`.
    FanIn,
    /// Truncated Gaussian with a fixed std (DCGAN-style discriminators).
    Fixed(f32),
}

impl Init {
    pub fn std(self, fan_in: usize) -> f32 {
        match self {
            Init::FanIn => (2.0 / fan_in as f32).sqrt(),
            Init::Fixed(s) => s,
        }
    }
}
