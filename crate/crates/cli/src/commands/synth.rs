use anyhow::bail;
use nucleus_core::data::{
    generate_synthetic, mirror_pairs, seven_class_templates, six_class_templates, ClassRef, ChannelUnits, DatasetKind,
    DatasetManifest, FileEntry, Normalization, SyntheticSpec, Windowing, MANIFEST_SCHEMA,
};
use nucleus_core::signal::SAMPLE_RATE_HZ;
use nucleus_core::text::render_description;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{ensure_dir, write_csv, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DESCRIPTIONS_FILE: &str = "descriptions.json";

/// Writes a synthetic gesture corpus in the canonical CSV + manifest layout,
/// plus class descriptions. Values are written at full precision, so loading
/// the manifest reproduces the generated windows exactly.
pub fn synth(cfg: &RunConfig) -> anyhow::Result<Value> {
    let s = &cfg.synth;
    let templates = match s.classes {
        6 => six_class_templates(),
        7 => seven_class_templates(),
        n => bail!("synthetic sets have 6 or 7 classes, not {n}"),
    };
    let mut spec = SyntheticSpec::new(templates.clone(), s.per_class, cfg.seed);
    spec.noise = s.noise;
    let set = generate_synthetic(&spec)?;
    let dir = cfg.out.join("recordings");
    ensure_dir(&dir)?;
    let mut files = Vec::with_capacity(set.windows.len());
    for (i, (w, &label)) in set.windows.iter().zip(&set.labels).enumerate() {
        let name = format!("{:04}_{}.csv", i, set.class_names[label]);
        write_csv(
            &dir.join(&name),
            &["t", "ax", "ay", "az", "gx", "gy", "gz"],
            w.samples().iter().enumerate().map(|(t, v)| {
                std::iter::once((t as f64 / SAMPLE_RATE_HZ).to_string())
                    .chain(v.iter().map(|&x| f64::from(x).to_string()))
                    .collect::<Vec<_>>()
            }),
        )?;
        files.push(FileEntry {
            path: format!("recordings/{name}").into(),
            user: "synthetic".into(),
            class: (!s.unlabeled).then_some(ClassRef::Index(label)),
            format: "csv".into(),
        });
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        name: format!("synthetic-{}class-seed{}", s.classes, cfg.seed),
        kind: DatasetKind::Gesture,
        sample_rate_hz: SAMPLE_RATE_HZ,
        channel_units: ChannelUnits::default(),
        class_names: set.class_names.clone(),
        user_ids: vec!["synthetic".into()],
        normalization: Normalization::None,
        windowing: Windowing::Single,
        files,
    };
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest)?;
    let descriptions: Vec<_> = set
        .attributes
        .iter()
        .enumerate()
        .map(|(i, a)| render_description(i, *a))
        .collect();
    write_json(&cfg.out.join(DESCRIPTIONS_FILE), &descriptions)?;
    Ok(json!({
        "dataset": manifest.name,
        "windows": set.windows.len(),
        "class_names": set.class_names,
        "labeled": !s.unlabeled,
        "mirror_pairs": mirror_pairs(&templates),
        "manifest": MANIFEST_FILE,
        "descriptions": DESCRIPTIONS_FILE,
    }))
}
