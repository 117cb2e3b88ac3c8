use std::path::Path;

use pivdiff_core::flow_io::{build_manifest, write_flo, write_image};
use pivdiff_core::synth::make_dataset;
use pivdiff_core::Split;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{create_dir, CliError};

/// Splits `uniform:3,0,rotation` into `["uniform:3,0", "rotation"]`: numeric
/// tokens belong to the spec before them.
pub fn split_flow_list(list: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match out.last_mut() {
            Some(prev) if tok.parse::<f64>().is_ok() => {
                prev.push(',');
                prev.push_str(tok);
            }
            _ => out.push(tok.to_string()),
        }
    }
    out
}

/// Writes `<out>/<kind>/<kind>_<i>_{img1.png,img2.png,flow.flo}`, a manifest
/// and the resolved config.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let synth = &cfg.data.synth;
    let flows = synth.flows()?;
    if flows.is_empty() {
        return Err(CliError::Input("no flows requested".into()));
    }
    let depth = synth.depth()?;
    create_dir(out)?;
    cfg.write(out)?;
    let samples = make_dataset(&flows, synth.per_flow, &synth.generator()).map_err(CliError::input)?;

    let kinds: Vec<&str> = flows.iter().flat_map(|f| std::iter::repeat_n(f.kind(), synth.per_flow)).collect();
    samples.par_iter().zip(kinds.par_iter()).try_for_each(|(s, kind)| {
        let dir = out.join(kind);
        create_dir(&dir)?;
        let path = |suffix: &str| dir.join(format!("{}{suffix}", s.id));
        write_image(s.pair.frame_a(), path("_img1.png"), depth).map_err(CliError::input)?;
        write_image(s.pair.frame_b(), path("_img2.png"), depth).map_err(CliError::input)?;
        let gt = s.gt.as_ref().expect("generated samples carry ground truth");
        write_flo(gt, path("_flow.flo")).map_err(CliError::input)
    })?;

    let manifest = build_manifest(out, cfg.data.split_seed).map_err(CliError::input)?;
    let manifest_path = out.join("manifest.tsv");
    manifest.write(&manifest_path).map_err(CliError::input)?;
    let count = |s: Split| manifest.split(s).count();
    println!(
        "wrote {} samples ({} flows x {}) to {}",
        samples.len(),
        flows.len(),
        synth.per_flow,
        out.display()
    );
    println!(
        "manifest {}: {} entries (train {}, val {}, test {})",
        manifest_path.display(),
        manifest.entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}
