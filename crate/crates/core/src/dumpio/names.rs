//! Canonical tensor names.

pub const INPUT_VOCAB: &str = "embed.input_vocab";
pub const OUTPUT_VOCAB: &str = "embed.output_vocab";

pub fn visual_proj(image: &str) -> String {
    format!("img/{image}/visual.proj")
}

/// Residual stream after layer `layer`; layer 0 is the input embedding sequence.
pub fn hidden(image: &str, layer: usize) -> String {
    format!("img/{image}/llm.hidden.L{layer}")
}

/// Attention sublayer output added to the residual stream in layer `layer` (1-based).
pub fn sub_att(image: &str, layer: usize) -> String {
    format!("img/{image}/llm.sub.L{layer}.att")
}

/// MLP sublayer output added to the residual stream in layer `layer` (1-based).
pub fn sub_mlp(image: &str, layer: usize) -> String {
    format!("img/{image}/llm.sub.L{layer}.mlp")
}

/// Head-averaged attention map of layer `layer` (1-based), `[n, n]` query × key.
pub fn attn(image: &str, layer: usize) -> String {
    format!("img/{image}/llm.attn.L{layer}")
}

pub fn vit_hidden(image: &str, layer: usize) -> String {
    format!("img/{image}/vit.hidden.L{layer}")
}

/// Splits `img/<id>/<suffix>` into `(id, suffix)`.
pub fn split_image_name(name: &str) -> Option<(&str, &str)> {
    let rest = name.strip_prefix("img/")?;
    let slash = rest.rfind('/')?;
    let (id, suffix) = (&rest[..slash], &rest[slash + 1..]);
    (!id.is_empty()).then_some((id, suffix))
}

/// Layer index of a `<prefix>L<n>` suffix such as `llm.hidden.L3`.
pub fn layer_of(suffix: &str, prefix: &str) -> Option<usize> {
    suffix.strip_prefix(prefix)?.strip_prefix('L')?.parse().ok()
}
