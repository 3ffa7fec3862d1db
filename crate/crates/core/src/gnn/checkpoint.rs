//! Model checkpoints: a text header followed by little-endian `f64` payloads.
//! The layout is documented in `docs/checkpoint-format.md`.

use std::io::{BufRead, Write};

use super::{Architecture, GnnModel, ModelSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "GNN-CHECKPOINT 1";

pub fn write_checkpoint(model: &GnnModel, mut w: impl Write) -> Result<()> {
    let s = model.spec();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "arch={}", s.arch)?;
    writeln!(w, "in_dim={}", s.in_dim)?;
    writeln!(w, "hidden_dim={}", s.hidden_dim)?;
    writeln!(w, "embed_dim={}", s.embed_dim)?;
    writeln!(w, "num_classes={}", s.num_classes)?;
    writeln!(w, "layers={}", s.layers)?;
    // Bit patterns keep the reals exact.
    writeln!(w, "dropout_bits={:016x}", s.dropout.to_bits())?;
    writeln!(w, "gin_eps_bits={:016x}", s.gin_eps.to_bits())?;
    writeln!(w, "seed={}", model.seed())?;
    for ((name, (r, c)), _) in s.param_layout().iter().zip(model.params()) {
        writeln!(w, "param {name} {r} {c}")?;
    }
    writeln!(w, "end")?;
    for p in model.params() {
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl BufRead) -> Result<GnnModel> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut fields = std::collections::HashMap::new();
    let mut shapes = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, rows, cols] = parts.as_slice() else {
                return Err(bad(format!("bad param line `{l}`")));
            };
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{l}`")));
            shapes.push((name.to_string(), (dim(rows)?, dim(cols)?)));
        } else if let Some((k, v)) = l.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        } else {
            return Err(bad(format!("bad header line `{l}`")));
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
    let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
    let real = |k: &str| -> Result<f64> {
        u64::from_str_radix(get(k)?, 16)
            .map(f64::from_bits)
            .map_err(|_| bad(format!("bad `{k}`")))
    };
    let spec = ModelSpec {
        arch: get("arch")?.parse::<Architecture>()?,
        in_dim: count("in_dim")?,
        hidden_dim: count("hidden_dim")?,
        embed_dim: count("embed_dim")?,
        num_classes: count("num_classes")?,
        layers: count("layers")?,
        dropout: real("dropout_bits")?,
        gin_eps: real("gin_eps_bits")?,
    };
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad `seed`".into()))?;
    if spec.param_layout() != shapes {
        return Err(bad("parameter list does not match the architecture".into()));
    }
    let mut params = Vec::with_capacity(shapes.len());
    let mut buf = [0u8; 8];
    for (_, (rows, cols)) in &shapes {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)
                .map_err(|_| bad("truncated parameter payload".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Tensor::from_vec(*rows, *cols, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after parameters".into()));
    }
    GnnModel::from_params(spec, seed, params)
}
