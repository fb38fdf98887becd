use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    /// Per-pixel adaptive convolution (sampling plus weighted sum).
    AdaptiveConv,
    Linear,
    Attention,
    Norm,
    /// Layer without an analytic count; tallied as zero.
    Other(&'static str),
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::AdaptiveConv => "arconv",
            LayerKind::Linear => "linear",
            LayerKind::Attention => "attention",
            LayerKind::Norm => "norm",
            LayerKind::Other(s) => s,
        }
    }
}

/// One multiply-accumulate tally recorded during a traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CostItem {
    pub layer: String,
    pub kind: LayerKind,
    pub macs: u64,
}

thread_local! {
    static TRACE: RefCell<Option<Vec<CostItem>>> = const { RefCell::new(None) };
}

pub(crate) fn record(layer: &str, kind: LayerKind, macs: u64) {
    TRACE.with(|t| {
        if let Some(items) = t.borrow_mut().as_mut() {
            let macs = match kind {
                LayerKind::Other(name) => {
                    log::debug!("no cost model for `{name}` layer `{layer}`; counted as zero");
                    0
                }
                _ => macs,
            };
            items.push(CostItem {
                layer: layer.to_string(),
                kind,
                macs,
            });
        }
    });
}

/// Runs `f` and returns the layers it evaluated on this thread.
pub fn trace_costs<R>(f: impl FnOnce() -> R) -> (R, Vec<CostItem>) {
    let prev = TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let out = f();
    let items = TRACE.with(|t| {
        let items = t.borrow_mut().take().unwrap_or_default();
        *t.borrow_mut() = prev;
        items
    });
    (out, items)
}
