/// Linear scorer for one extra thinking step: `weight [d, 1]`, `bias [1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    pub weight: T,
    pub bias: T,
}

/// Learnable pieces of one inner-thinking layer.
///
/// `step_encodings[0]` scales the base pass; `step_encodings[t]` and
/// `routers[t - 1]` belong to extra step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinkingParams<T> {
    pub step_encodings: Vec<T>,
    pub routers: Vec<RouterParams<T>>,
}

impl<T> ThinkingParams<T> {
    pub fn extra_steps(&self) -> usize {
        self.routers.len()
    }
}
