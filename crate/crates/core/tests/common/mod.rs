#![allow(dead_code)]

use std::path::Path;

use strokeseg::experiments::SelectionCandidate;
use strokeseg::{FreezeMode, Fusion, InputSet, ModelConfig};

/// Reads the published input/freeze sweep summary into selection candidates.
pub fn sweep_summary_candidates() -> Vec<SelectionCandidate> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sweep_summary.csv");
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (fu, fr, mip, nihss) = (col("fusion"), col("freeze"), col("mip"), col("nihss"));
    let (dice, dv) = (col("dice_lvo_penumbra_mean"), col("dv_lvo_core_mean"));
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            let fusion = match &r[fu] {
                "SF" => Fusion::SlowFusion,
                "EF" => Fusion::EarlyFusion,
                "EFI" => Fusion::EarlyFusionInflated,
                other => panic!("fusion {other}"),
            };
            let freeze = match &r[fr] {
                "F" => FreezeMode::Frozen,
                "U" => FreezeMode::Unfrozen,
                "G" => FreezeMode::Gradual,
                other => panic!("freeze {other}"),
            };
            let inputs = InputSet { mip: r[mip].parse().unwrap(), nihss: r[nihss].parse().unwrap() };
            SelectionCandidate {
                label: ModelConfig::new(fusion, inputs, freeze).label(),
                lvo_penumbra_dice: r[dice].parse().unwrap(),
                lvo_core_delta_v: r[dv].parse().unwrap(),
            }
        })
        .collect()
}
