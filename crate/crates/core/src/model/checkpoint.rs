//! Flat-text checkpoint format.
//!
//! ```text
//! patchmixer-checkpoint 1
//! dtype f32
//! config L=336 T=96 P=16 S=8 D=256 K=8 dropout=0.2 heads=dual depth=1
//! param embed.weight 16,256
//! <row-major values separated by spaces>
//! buffer block.bn1.running_mean 42
//! <values>
//! end
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! bits, so a save/load cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{HeadMode, ModelConfig, PatchMixerModel};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::patching::PatchConfig;

const MAGIC: &str = "patchmixer-checkpoint 1";

pub fn write_checkpoint<F: Scalar>(model: &PatchMixerModel<F>) -> String {
    let c = model.config();
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "dtype {}", F::NAME);
    let _ = writeln!(
        s,
        "config L={} T={} P={} S={} D={} K={} dropout={} heads={} depth={}",
        c.patch.lookback,
        c.horizon,
        c.patch.patch_len,
        c.patch.stride,
        c.patch.dim,
        c.kernel,
        c.dropout,
        c.heads,
        c.depth
    );
    let mut emit = |kind: &str, name: &str, shape: &[usize], data: &[F]| {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{kind} {name} {}", dims.join(","));
        let vals: Vec<String> = data.iter().map(F::to_string).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    };
    for (name, t) in model.param_names().iter().zip(model.params()) {
        emit("param", name, t.shape(), t.data());
    }
    for (i, st) in model.batch_norm_states().iter().enumerate() {
        let n = st.running_mean.len();
        emit("buffer", &format!("block.bn{}.running_mean", i + 1), &[n], &st.running_mean);
        emit("buffer", &format!("block.bn{}.running_var", i + 1), &[n], &st.running_var);
    }
    s.push_str("end\n");
    s
}

pub fn save_checkpoint<F: Scalar>(model: &PatchMixerModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<PatchMixerModel<F>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_config(line: &str) -> Result<ModelConfig> {
    let body = line.strip_prefix("config ").ok_or_else(|| bad("missing config line"))?;
    let mut kv = std::collections::HashMap::new();
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("bad config token `{tok}`")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("config lacks `{k}`")));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| bad(format!("config `{k}` is not an integer")))
    };
    let patch = PatchConfig::new(num("L")?, num("P")?, num("S")?, num("D")?)?;
    let mut cfg = ModelConfig::new(patch, num("T")?);
    cfg.kernel = num("K")?;
    cfg.depth = num("depth")?;
    cfg.dropout = get("dropout")?
        .parse()
        .map_err(|_| bad("config `dropout` is not a number"))?;
    cfg.heads = get("heads")?.parse::<HeadMode>()?;
    Ok(cfg)
}

pub fn read_checkpoint<F: Scalar>(text: &str) -> Result<PatchMixerModel<F>> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a patchmixer checkpoint (bad header)"));
    }
    let dtype = lines.next().and_then(|l| l.strip_prefix("dtype ")).unwrap_or("");
    if dtype != F::NAME {
        return Err(bad(format!("checkpoint dtype `{dtype}`, expected {}", F::NAME)));
    }
    let cfg = parse_config(lines.next().unwrap_or(""))?;
    let mut params = Vec::new();
    let mut buffers: Vec<Vec<F>> = Vec::new();
    loop {
        let head = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
        if head == "end" {
            break;
        }
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [kind, name, dims] = parts[..] else {
            return Err(bad(format!("bad tensor header `{head}`")));
        };
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
            .collect::<Result<_>>()?;
        let values: Vec<F> = lines
            .next()
            .ok_or_else(|| bad(format!("missing values for {name}")))?
            .split_whitespace()
            .map(|v| v.parse::<F>().map_err(|_| bad(format!("bad value `{v}` in {name}"))))
            .collect::<Result<_>>()?;
        match kind {
            "param" => params.push(Tensor::new(shape, values)?),
            "buffer" => buffers.push(values),
            _ => return Err(bad(format!("unknown entry kind `{kind}`"))),
        }
    }
    let mut model = PatchMixerModel::from_params(cfg, params)?;
    let states = model.batch_norm_states_mut();
    if buffers.len() != 2 * states.len() {
        return Err(bad(format!(
            "expected {} batch-norm buffers, found {}",
            2 * states.len(),
            buffers.len()
        )));
    }
    for (st, pair) in states.iter_mut().zip(buffers.chunks_exact(2)) {
        if pair[0].len() != st.channels() || pair[1].len() != st.channels() {
            return Err(bad("batch-norm buffer length mismatch"));
        }
        st.running_mean = pair[0].clone();
        st.running_var = pair[1].clone();
    }
    Ok(model)
}
