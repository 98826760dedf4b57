//! Construction-time checks of the fusion layer sizes plus the loss
//! weighting fixture. Cheap enough to run on every invocation of
//! `maff selftest`.

use maff_core::diffcore::Tensor;
use maff_core::fusion::{AttentionMlp, MlpPD, PillarEncoder, FusionMode};
use maff_core::net::{total_loss, LossWeights};
use maff_core::pillars::{build_pillar_batch, decorate_points, PillarGridConfig};
use maff_core::kittio::Point;
use maff_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub expected: String,
    pub actual: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

fn check(name: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Check {
    Check { name, expected: format!("{expected:?}"), actual: format!("{actual:?}") }
}

fn mlp_pd_dims(m: &MlpPD) -> Vec<usize> {
    let mut d = vec![m.blocks[0].dims().0];
    d.extend(m.blocks.iter().map(|b| b.dims().1));
    d
}

fn att_dims(a: &AttentionMlp) -> (usize, usize, usize) {
    (a.fc1.in_dim(), a.fc1.out_dim(), a.fc2.out_dim())
}

/// Width of the DAF encoder output on a real (tiny) pillar batch.
fn daf_output_width(enc: &PillarEncoder) -> Result<usize> {
    let grid = PillarGridConfig::default();
    let pts: Vec<Point> = (0..6).map(|i| Point::new(1.0 + 0.3 * i as f64, 0.2 * i as f64, -1.0, 0.5)).collect();
    let dec = decorate_points(&pts, &grid)?;
    let batch = build_pillar_batch(&dec, &grid, 0)?;
    let rgb = Tensor::new(&[batch.num_points(), 3], vec![0.5; batch.num_points() * 3])?;
    Ok(enc.forward(&batch, &rgb, false)?.shape()[1])
}

pub fn run_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    match PillarEncoder::new(FusionMode::Paf, &mut rng) {
        PillarEncoder::Paf(m) => {
            let a = m.attention.as_ref().ok_or_else(|| Error::Contract("paf without attention".into()))?;
            out.push(check("MLP_PD", [3, 96, 16], mlp_pd_dims(&m.mlp_pd)));
            out.push(check("MLP_P", (25, 25, 9), att_dims(&a.mlp_p)));
            out.push(check("MLP_I", (25, 25, 16), att_dims(&a.mlp_i)));
            out.push(check("PAF PFN", (50, 64), m.pfn.dims()));
        }
        _ => return Err(Error::Contract("paf mode built a non-paf encoder".into())),
    }
    let daf = PillarEncoder::new(FusionMode::Daf, &mut rng);
    match &daf {
        PillarEncoder::Daf(m) => {
            let a = m.attention.as_ref().ok_or_else(|| Error::Contract("daf without attention".into()))?;
            for (name, mlp) in [("DAF MLP_P", &a.mlp_p), ("DAF MLP_PI", &a.mlp_pi), ("DAF MLP_I", &a.mlp_i)] {
                out.push(check(name, (192, 192, 64), att_dims(mlp)));
            }
        }
        _ => return Err(Error::Contract("daf mode built a non-daf encoder".into())),
    }
    out.push(check("DAF fusion dim", 256, daf_output_width(&daf)?));
    out.push(check("DAF declared dim", 256, FusionMode::Daf.out_channels()));

    let one = Tensor::new(&[1], vec![1.0])?;
    for (n_pos, want) in [(1usize, 3.2), (2, 1.6)] {
        let t = total_loss(&one, &one, &one, n_pos, LossWeights::default())?.item()?;
        out.push(check(if n_pos == 1 { "loss fixture N_pos=1" } else { "loss fixture N_pos=2" }, want, t));
    }
    Ok(out)
}

/// Prints one line per check; fails if any check did.
pub fn cmd_selftest() -> Result<()> {
    let checks = run_checks()?;
    let mut failed = Vec::new();
    for c in &checks {
        let tag = if c.passed() { "ok  " } else { "FAIL" };
        println!("{tag} {:<22} expected {} got {}", c.name, c.expected, c.actual);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("self-test failed: {}", failed.join(", "))))
    }
}
