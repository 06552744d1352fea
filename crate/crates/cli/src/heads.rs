use anyhow::{bail, Context, Result};
use headlab::{DitConfig, HeadId};

/// Parses `all`, whole-layer tokens (`L3:*` or `3:*`) and `layer:head`
/// pairs, comma separated. Duplicates are rejected.
pub fn parse_heads(s: &str, model: &DitConfig) -> Result<Vec<HeadId>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok(model.all_heads());
    }
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim) {
        if tok.is_empty() {
            bail!("empty entry in head list `{s}`");
        }
        let tok = tok.strip_prefix(['L', 'l']).unwrap_or(tok);
        let (layer, head) = tok
            .split_once(':')
            .with_context(|| format!("head `{tok}` is not `layer:head`"))?;
        let layer: usize = layer.trim().parse().with_context(|| format!("bad layer in `{tok}`"))?;
        if layer >= model.layers {
            bail!("layer {layer} out of range (model has {} layers)", model.layers);
        }
        if head.trim() == "*" {
            out.extend((0..model.heads_per_layer).map(|h| HeadId::new(layer, h)));
            continue;
        }
        let head: usize = head.trim().parse().with_context(|| format!("bad head in `{tok}`"))?;
        if head >= model.heads_per_layer {
            bail!("head {head} out of range (layer has {} heads)", model.heads_per_layer);
        }
        out.push(HeadId::new(layer, head));
    }
    let mut sorted = out.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        bail!("head {} listed twice", w[0]);
    }
    Ok(out)
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let vals = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("bad grid value `{t}`")))
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        bail!("grid `{s}` is empty");
    }
    Ok(vals)
}
