//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations, each a thin wrapper over the core crate: sample a
//! synthetic shape, split it into FPS/KNN patches with a random mask, and run
//! a randomly initialized tiny encoder to show per-token and per-state
//! activations. All arrays cross the boundary as flat `Float64Array`s or
//! typed integer arrays.

use pointssm::blocks::{encoder, init_model, ModelConfig, ENCODER};
use pointssm::numerics::Tape;
use pointssm::pointops::{group, synth_shape, Point, PointCloud};
use pointssm::pretrain::{make_mask, Sample};
use pointssm::Result;
use wasm_bindgen::prelude::*;

fn js(e: pointssm::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn cloud_from_flat(xyz: &[f64]) -> Result<PointCloud> {
    if !xyz.len().is_multiple_of(3) {
        return Err(pointssm::Error::Dimension(format!("flat coordinates of length {} are not xyz triples", xyz.len())));
    }
    PointCloud::new(xyz.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Point>>())
}

fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

/// Patch assignment of every point plus the mask over patches.
#[wasm_bindgen(getter_with_clone)]
#[derive(Clone, Debug)]
pub struct Patches {
    /// Per point, the patch whose neighborhood contains it (the nearest
    /// center wins on overlap), or -1 when no patch covers it.
    pub label: Vec<i32>,
    /// `[N * 3]` patch centers in FPS order.
    pub centers: Vec<f64>,
    /// Per patch, 1 if hidden from the encoder during pretraining.
    pub masked: Vec<u8>,
}

/// Per-token and per-state activation norms of one encoder pass.
#[wasm_bindgen(getter_with_clone)]
#[derive(Clone, Debug)]
pub struct Activations {
    /// `[N * 3]` token centers.
    pub centers: Vec<f64>,
    pub token_norm: Vec<f64>,
    /// `[M * 3]` spatial state positions.
    pub state_pos: Vec<f64>,
    pub state_norm: Vec<f64>,
}

/// Samples `n` points on `kind` (sphere, cube, torus, plane) as flat xyz.
#[wasm_bindgen(js_name = sampleShape)]
pub fn sample_shape(kind: &str, n: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    sample_shape_impl(kind, n, seed).map_err(js)
}

fn sample_shape_impl(kind: &str, n: usize, seed: u32) -> Result<Vec<f64>> {
    Ok(flatten(synth_shape(kind.parse()?, n, seed as u64)?.points()))
}

/// Groups the cloud into `n_groups` patches of `group_size` points and masks `mask_ratio` of them.
#[wasm_bindgen(js_name = makePatches)]
pub fn make_patches(xyz: &[f64], n_groups: usize, group_size: usize, mask_ratio: f64, seed: u32) -> std::result::Result<Patches, JsError> {
    make_patches_impl(xyz, n_groups, group_size, mask_ratio, seed).map_err(js)
}

fn make_patches_impl(xyz: &[f64], n_groups: usize, group_size: usize, mask_ratio: f64, seed: u32) -> Result<Patches> {
    let cloud = cloud_from_flat(xyz)?;
    let g = group(&cloud, n_groups, group_size, 0)?;
    let mut best = vec![(-1i32, f64::INFINITY); cloud.len()];
    for p in 0..g.len() {
        let rel = &g.grouped_points.data()[p * group_size * 3..(p + 1) * group_size * 3];
        for (&i, r) in g.neighbors(p).iter().zip(rel.chunks(3)) {
            let d = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
            if d < best[i].1 {
                best[i] = (p as i32, d);
            }
        }
    }
    let plan = make_mask(g.len(), mask_ratio, seed as u64)?;
    let mut masked = vec![0u8; g.len()];
    plan.masked_idx.iter().for_each(|&i| masked[i] = 1);
    Ok(Patches { label: best.into_iter().map(|b| b.0).collect(), centers: g.centers.data().to_vec(), masked })
}

/// Runs a freshly initialized tiny encoder (weights drawn from `seed`) on the cloud.
#[wasm_bindgen]
pub fn encode(xyz: &[f64], seed: u32) -> std::result::Result<Activations, JsError> {
    encode_impl(xyz, seed).map_err(js)
}

fn encode_impl(xyz: &[f64], seed: u32) -> Result<Activations> {
    let cfg = ModelConfig { seed: seed as u64, ..ModelConfig::tiny() };
    let cloud = cloud_from_flat(xyz)?;
    let params = init_model(&cfg).subset(&format!("{ENCODER}."));
    let sample = Sample::new(&cloud, &cfg)?;
    let mut tape = Tape::no_grad();
    let out = encoder(&mut tape, &params, &cfg, &sample.grouped, &sample.state_pos)?;
    let norms = |t: &pointssm::numerics::Tensor| (0..t.rows()).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(Activations {
        centers: sample.grouped.centers.data().to_vec(),
        token_norm: norms(tape.value(out.tokens)),
        state_pos: sample.state_pos.data().to_vec(),
        state_norm: norms(tape.value(out.states)),
    })
}
