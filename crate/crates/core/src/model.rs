//! Instrumented true-model handles.

/// Wraps a model so every call is counted exactly once.
pub struct Counted<F> {
    f: F,
    calls: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    pub fn new(f: F) -> Self {
        Self { f, calls: 0 }
    }

    pub fn call(&mut self, x: &[f64]) -> f64 {
        self.calls += 1;
        (self.f)(x)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}
