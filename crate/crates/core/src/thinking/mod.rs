//! Inner-thinking layers: routed extra steps, step encodings and residual
//! accumulation of step outputs.

mod layer;
mod params;
mod policy;
mod routing;

pub use layer::{
    atr_step, itt_layer_forward, rtc_combine, Gating, LayerTrace, RoutingTrace, StepTrace, ThinkingContext,
};
pub use params::{RouterParams, ThinkingParams};
pub use policy::{
    parse_capacity_override, CapacitySchedule, Normalization, Reweighting, RoutingPolicy, Selection,
    StepCapacity,
};
pub use routing::{decode_gate, router_score, select_tokens, selected_count};
