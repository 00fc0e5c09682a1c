use anyhow::bail;
use nucleus_core::data;
use nucleus_core::encoder::{AttentionMaps, EncoderBatch};
use nucleus_core::nn::Ctx;
use nucleus_core::signal::analyze;
use serde_json::{json, Value};

use super::{load_encoder, load_manifest};
use crate::config::RunConfig;
use crate::output::{ensure_dir, write_csv};

const CHUNK: usize = 32;

/// Exports one window's `[T × T]` map per layer and head plus its nucleus
/// annotation, and the in-nucleus column attention mass over the whole
/// manifest.
pub fn attention(cfg: &RunConfig) -> anyhow::Result<Value> {
    let (model, fingerprint) = load_encoder(cfg.checkpoint()?)?;
    let windows = data::load_unlabeled(&load_manifest(cfg.manifest()?)?)?;
    if cfg.window >= windows.len() {
        bail!("window {} outside the {} loaded windows", cfg.window, windows.len());
    }
    let nucleus_cfg = cfg.pretrain.nucleus;
    let mut masses = Vec::with_capacity(windows.len());
    let mut uniform = Vec::with_capacity(windows.len());
    let mut exported = None;
    for (c, chunk) in windows.chunks(CHUNK).enumerate() {
        let mut batch = EncoderBatch::new(model.config.seq_len);
        let mut regions = Vec::with_capacity(chunk.len());
        for w in chunk {
            let (n, a) = analyze(w, &nucleus_cfg)?;
            batch.push(w, &n, &a)?;
            regions.push(n);
        }
        let pass = model.forward(&batch, &mut Ctx::eval());
        for (i, (w, n)) in chunk.iter().zip(&regions).enumerate() {
            let maps = AttentionMaps::from_graph(&pass.graph, &pass.attention, i);
            let rows: Vec<bool> = w.pad_mask().iter().map(|p| !p).collect();
            masses.push(maps.column_mass(&rows, &n.in_nucleus));
            uniform.push(n.size() as f64 / w.valid_count() as f64);
            if c * CHUNK + i == cfg.window {
                exported = Some((maps, n.clone()));
            }
        }
    }
    let (maps, nucleus) = exported.expect("window index checked above");
    let dir = cfg.out.join("attention");
    ensure_dir(&dir)?;
    let t = maps.seq;
    let mut files = Vec::new();
    for l in 0..maps.layers {
        for h in 0..maps.heads {
            let name = format!("layer{l}_head{h}.csv");
            let m = maps.map(l, h);
            let header: Vec<String> = (0..t).map(|k| format!("k{k}")).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write_csv(
                &dir.join(&name),
                &header,
                m.chunks(t).map(|row| row.iter().map(ToString::to_string).collect::<Vec<_>>()),
            )?;
            files.push(name);
        }
    }
    let w = &windows[cfg.window];
    write_csv(
        &dir.join("nucleus.csv"),
        &["t", "in_nucleus", "padded"],
        (0..t).map(|s| {
            vec![
                s.to_string(),
                u8::from(nucleus.in_nucleus[s]).to_string(),
                u8::from(w.is_padded(s)).to_string(),
            ]
        }),
    )?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(json!({
        "encoder_sha256": fingerprint,
        "window": cfg.window,
        "layers": maps.layers,
        "heads": maps.heads,
        "files": files,
        "nucleus_regions": nucleus.regions,
        "window_in_nucleus_mass": masses[cfg.window],
        "mean_in_nucleus_mass": mean(&masses),
        "mean_uniform_mass": mean(&uniform),
        "windows": windows.len(),
    }))
}
