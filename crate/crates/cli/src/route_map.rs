//! Per-expert routing heatmaps over a token grid: gate probabilities after
//! the softmax and before top-K selection, with noise off.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use biomoe_core::landmark::{LandmarkSet, Region};
use biomoe_core::moe::{pool_sequence, structure_features};
use biomoe_core::trainer::{grid_positions, random_tokens};
use biomoe_core::{Error, Result, TaskId, UnifiedModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The toy model has a single expert layer.
pub const NUM_LAYERS: usize = 1;

/// Region centroids used as gate landmarks, in this order.
pub const LANDMARK_ORDER: [Region; 8] = [
    Region::LeftEye,
    Region::RightEye,
    Region::NoseTip,
    Region::Mouth,
    Region::LeftEyebrow,
    Region::RightEyebrow,
    Region::LeftPupil,
    Region::RightPupil,
];

#[derive(Debug, Clone, PartialEq)]
pub struct RouteMap {
    pub layer: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major over the grid; one probability per expert.
    pub probabilities: Vec<Vec<f64>>,
}

/// First `m` region centroids in [`LANDMARK_ORDER`], mapped from normalized
/// image coordinates to grid coordinates.
pub fn grid_landmarks(lm: &LandmarkSet, m: usize, width: usize, height: usize) -> Result<Vec<(f64, f64)>> {
    if m > LANDMARK_ORDER.len() {
        return Err(Error::Config(format!(
            "the model expects {m} landmarks; a landmark file provides at most {}",
            LANDMARK_ORDER.len()
        )));
    }
    Ok(LANDMARK_ORDER[..m]
        .iter()
        .map(|r| {
            let c = lm.centroid(r);
            (c[0] * (width as f64 - 1.0), c[1] * (height as f64 - 1.0))
        })
        .collect())
}

pub fn compute_route_map(
    model: &UnifiedModel,
    task: &TaskId,
    landmarks: &LandmarkSet,
    width: usize,
    height: usize,
    layer: usize,
    seed: u64,
) -> Result<RouteMap> {
    if width == 0 || height == 0 {
        return Err(Error::Config("grid dimensions must be positive".into()));
    }
    if layer >= NUM_LAYERS {
        return Err(Error::Config(format!("layer {layer} does not exist; the model has {NUM_LAYERS}")));
    }
    let idx = model.tasks().index_of(task)?;
    let cfg = model.config();
    let lms = grid_landmarks(landmarks, cfg.num_landmarks, width, height)?;
    let positions = grid_positions(width, height);
    // Probe tokens are fixed by the seed so the map is reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = random_tokens(positions.len(), cfg.d_model, &mut rng);
    let projection = &model.tasks().slots()[idx].projection;
    let projected: Vec<Vec<f64>> = tokens.iter().map(|x| projection.forward(x)).collect();
    let pooled = pool_sequence(&projected)?;
    let probabilities = projected
        .iter()
        .zip(&positions)
        .map(|(z, &p)| {
            let s = structure_features(&lms, p, cfg.num_landmarks)?;
            model.gate_probabilities(idx, z, &pooled, &s)
        })
        .collect::<Result<_>>()?;
    Ok(RouteMap {
        layer,
        width,
        height,
        probabilities,
    })
}

impl RouteMap {
    pub fn num_experts(&self) -> usize {
        self.probabilities.first().map_or(0, Vec::len)
    }

    /// Plain-text grayscale image of one expert, `p · 255` rounded.
    pub fn pgm(&self, expert: usize) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.probabilities.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|p| ((p[expert] * 255.0).round().clamp(0.0, 255.0) as u8).to_string())
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Full-precision dump; `f64` display is shortest round-trip.
    pub fn csv(&self) -> String {
        let mut s = String::from("row,col");
        for e in 0..self.num_experts() {
            write!(s, ",expert_{e}").unwrap();
        }
        s.push('\n');
        for (i, p) in self.probabilities.iter().enumerate() {
            write!(s, "{},{}", i / self.width, i % self.width).unwrap();
            for v in p {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for e in 0..self.num_experts() {
            let path = dir.join(format!("route_map_layer{}_expert{e}.pgm", self.layer));
            std::fs::write(&path, self.pgm(e))?;
            written.push(path);
        }
        let path = dir.join(format!("route_map_layer{}.csv", self.layer));
        std::fs::write(&path, self.csv())?;
        written.push(path);
        Ok(written)
    }
}

/// Parses a dump written by [`RouteMap::csv`] back into probabilities.
pub fn parse_route_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(1)
        .map(|line| {
            line.split(',')
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{v}`"))))
                .collect()
        })
        .collect()
}
