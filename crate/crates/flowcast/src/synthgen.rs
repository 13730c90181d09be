//! Deterministic synthetic moving-scene generator: rectangles and ellipses
//! translate (with optional constant acceleration) over a moving background,
//! bouncing off frame borders. Emits per-frame instance masks, semantic maps,
//! and analytic ground-truth forward flows.
//!
//! Occlusion order is fixed by object index: later-indexed objects are nearer
//! and occlude earlier ones.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    flow_read, flow_write, labels_read, labels_write, FlowField, InstanceMask, SampleMeta,
    SemanticMap, SequenceSample, NUM_CLASSES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Half-extent range in pixels per axis.
    pub size_range: (f64, f64),
    /// Per-axis velocity ranges in px/frame. The defaults make horizontal
    /// motion dominate, like traffic crossing an ego-centric camera.
    pub vel_range_x: (f64, f64),
    pub vel_range_y: (f64, f64),
    /// Constant global background velocity in px/frame.
    pub background_velocity: (f64, f64),
    /// Per-axis constant acceleration range in px/frame^2.
    pub accel_range: (f64, f64),
    /// Box-blur radius applied to the emitted flow fields (0 = exact).
    /// Real flow estimators smear motion boundaries; this reproduces that
    /// artifact so flows disagree with masks near object edges.
    pub flow_smooth: usize,
    pub frames: usize,
    /// Snap sizes, positions, and velocities to whole pixels so masks
    /// translate bit-exactly (no acceleration applied in this mode).
    pub integer_motion: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 128,
            n_objects: 3,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            size_range: (4.0, 8.0),
            vel_range_x: (-2.5, 2.5),
            vel_range_y: (-1.2, 1.2),
            background_velocity: (0.0, 0.0),
            accel_range: (0.0, 0.0),
            flow_smooth: 0,
            frames: 16,
            integer_motion: false,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames < 2 {
            return Err(Error::Config("need nonzero grid and >= 2 frames".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("no shape kinds configured".into()));
        }
        if self.size_range.0 <= 0.0 || self.size_range.0 > self.size_range.1 {
            return Err(Error::Config("bad size range".into()));
        }
        let max_extent = 2.0 * self.size_range.1;
        if max_extent >= self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "object extent {} does not fit a {}x{} frame",
                max_extent, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SceneObject {
    id: u64,
    class_id: u8,
    score: f64,
    kind: ShapeKind,
    /// Half extents (x, y).
    half: (f64, f64),
    /// Center position, updated per frame.
    pos: (f64, f64),
    vel: (f64, f64),
    accel: (f64, f64),
}

impl SceneObject {
    fn covers(&self, col: usize, row: usize) -> bool {
        let px = col as f64 + 0.5 - self.pos.0;
        let py = row as f64 + 0.5 - self.pos.1;
        match self.kind {
            ShapeKind::Rectangle => px.abs() <= self.half.0 && py.abs() <= self.half.1,
            ShapeKind::Ellipse => {
                let nx = px / self.half.0;
                let ny = py / self.half.1;
                nx * nx + ny * ny <= 1.0
            }
        }
    }

    /// One motion step with border bouncing; keeps the center inside
    /// [half, dim - half] per axis so every object stays at least
    /// partially visible for the whole horizon.
    fn step(&mut self, width: usize, height: usize) {
        self.vel.0 += self.accel.0;
        self.vel.1 += self.accel.1;
        self.pos.0 += self.vel.0;
        self.pos.1 += self.vel.1;
        let bounce = |pos: &mut f64, vel: &mut f64, lo: f64, hi: f64| {
            // reflect until inside; a step never overshoots by more than a span
            for _ in 0..8 {
                if *pos < lo {
                    *pos = 2.0 * lo - *pos;
                    *vel = -*vel;
                } else if *pos > hi {
                    *pos = 2.0 * hi - *pos;
                    *vel = -*vel;
                } else {
                    break;
                }
            }
        };
        bounce(
            &mut self.pos.0,
            &mut self.vel.0,
            self.half.0,
            width as f64 - self.half.0,
        );
        bounce(
            &mut self.pos.1,
            &mut self.vel.1,
            self.half.1,
            height as f64 - self.half.1,
        );
    }
}

fn sample_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for i in 0..cfg.n_objects {
        let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
        let mut hx = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
        let mut hy = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
        let class_id = rng.gen_range(1..=NUM_CLASSES);
        let score = rng.gen_range(0.6..1.0);
        let mut px = rng.gen_range(hx..(cfg.width as f64 - hx));
        let mut py = rng.gen_range(hy..(cfg.height as f64 - hy));
        let mut vx = rng.gen_range(cfg.vel_range_x.0..=cfg.vel_range_x.1);
        let mut vy = rng.gen_range(cfg.vel_range_y.0..=cfg.vel_range_y.1);
        let mut ax = rng.gen_range(cfg.accel_range.0..=cfg.accel_range.1);
        let mut ay = rng.gen_range(cfg.accel_range.0..=cfg.accel_range.1);
        if cfg.integer_motion {
            hx = hx.round().max(1.0);
            hy = hy.round().max(1.0);
            px = px.round().clamp(hx, cfg.width as f64 - hx);
            py = py.round().clamp(hy, cfg.height as f64 - hy);
            vx = vx.round();
            vy = vy.round();
            ax = 0.0;
            ay = 0.0;
        }
        objects.push(SceneObject {
            id: i as u64 + 1,
            class_id,
            score,
            kind,
            half: (hx, hy),
            pos: (px, py),
            vel: (vx, vy),
            accel: (ax, ay),
        });
    }
    objects
}

/// Owner index per pixel: `None` = background, `Some(i)` = objects[i]
/// (highest index wins under occlusion).
fn ownership(objects: &[SceneObject], height: usize, width: usize) -> Array2<Option<usize>> {
    let mut owner = Array2::from_elem((height, width), None);
    for (i, obj) in objects.iter().enumerate() {
        let x0 = ((obj.pos.0 - obj.half.0).floor().max(0.0)) as usize;
        let x1 = ((obj.pos.0 + obj.half.0).ceil().min(width as f64)) as usize;
        let y0 = ((obj.pos.1 - obj.half.1).floor().max(0.0)) as usize;
        let y1 = ((obj.pos.1 + obj.half.1).ceil().min(height as f64)) as usize;
        for r in y0..y1 {
            for c in x0..x1 {
                if obj.covers(c, r) {
                    owner[(r, c)] = Some(i);
                }
            }
        }
    }
    owner
}

fn render_frame(
    objects: &[SceneObject],
    cfg: &SceneConfig,
) -> (Vec<InstanceMask>, SemanticMap, Array2<Option<usize>>) {
    let owner = ownership(objects, cfg.height, cfg.width);
    let mut sem = Array2::zeros((cfg.height, cfg.width));
    let mut masks: Vec<Array2<u8>> = objects
        .iter()
        .map(|_| Array2::zeros((cfg.height, cfg.width)))
        .collect();
    for ((r, c), &own) in owner.indexed_iter() {
        if let Some(i) = own {
            sem[(r, c)] = objects[i].class_id;
            masks[i][(r, c)] = 1;
        }
    }
    let instances = objects
        .iter()
        .zip(masks)
        .map(|(o, m)| InstanceMask::new(o.id, o.class_id, o.score, m))
        .collect();
    (instances, SemanticMap { labels: sem }, owner)
}

/// Mean over a clamped (2r+1)^2 window; edges average fewer samples.
fn box_blur(field: &Array2<f32>, radius: usize) -> Array2<f32> {
    let (h, w) = field.dim();
    let r = radius as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut sum = 0.0f64;
            let mut n = 0u32;
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        sum += field[(y as usize, x as usize)] as f64;
                        n += 1;
                    }
                }
            }
            out[(i as usize, j as usize)] = (sum / n as f64) as f32;
        }
    }
    out
}

/// Generate a full sequence. Pure in (config, seed): identical inputs give
/// bit-identical output.
pub fn generate(cfg: &SceneConfig) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut objects = sample_objects(cfg, &mut rng);

    let mut instances = Vec::with_capacity(cfg.frames);
    let mut semantics = Vec::with_capacity(cfg.frames);
    let mut flows = Vec::with_capacity(cfg.frames - 1);
    for t in 0..cfg.frames {
        let (inst, sem, owner) = render_frame(&objects, cfg);
        instances.push(inst);
        semantics.push(sem);
        if t + 1 < cfg.frames {
            let before: Vec<(f64, f64)> = objects.iter().map(|o| o.pos).collect();
            for obj in objects.iter_mut() {
                obj.step(cfg.width, cfg.height);
            }
            // flow at each pixel = displacement of the object owning it
            let mut u = Array2::zeros((cfg.height, cfg.width));
            let mut v = Array2::zeros((cfg.height, cfg.width));
            for ((r, c), &own) in owner.indexed_iter() {
                let (du, dv) = match own {
                    Some(i) => (
                        objects[i].pos.0 - before[i].0,
                        objects[i].pos.1 - before[i].1,
                    ),
                    None => cfg.background_velocity,
                };
                u[(r, c)] = du as f32;
                v[(r, c)] = dv as f32;
            }
            if cfg.flow_smooth > 0 {
                u = box_blur(&u, cfg.flow_smooth);
                v = box_blur(&v, cfg.flow_smooth);
            }
            flows.push(FlowField { u, v });
        }
    }
    let sample = SequenceSample {
        flows,
        instances,
        semantics,
        meta: SampleMeta {
            seed: cfg.seed,
            config: serde_json::to_string(cfg)?,
        },
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
    pub split: Split,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceMeta {
    id: u64,
    class_id: u8,
    score: f64,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SequenceMeta {
    seed: u64,
    config: String,
    /// Per frame, the instance records in object order.
    instances: Vec<Vec<InstanceMeta>>,
}

/// Write `n_sequences` sequences (seeds `cfg.seed .. cfg.seed + n`) under
/// `out_dir` and a `manifest.jsonl` listing them. Even seeds go to the
/// train split, odd seeds to val.
pub fn emit_dataset(cfg: &SceneConfig, n_sequences: usize, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let mut scfg = cfg.clone();
        scfg.seed = cfg.seed + i as u64;
        let sample = generate(&scfg)?;
        let dir_name = format!("seq_{:06}", scfg.seed);
        let seq_dir = out_dir.join(&dir_name);
        fs::create_dir_all(&seq_dir)?;
        write_sequence(&sample, &seq_dir)?;
        entries.push(ManifestEntry {
            dir: dir_name,
            seed: scfg.seed,
            split: if scfg.seed % 2 == 0 { Split::Train } else { Split::Val },
            frames: sample.frames(),
            height: sample.height(),
            width: sample.width(),
        });
    }
    let mut f = fs::File::create(out_dir.join("manifest.jsonl"))?;
    for e in &entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(entries)
}

fn write_sequence(sample: &SequenceSample, dir: &Path) -> Result<()> {
    for (i, flow) in sample.flows.iter().enumerate() {
        flow_write(flow, &dir.join(format!("flow_{i:03}.flo")))?;
    }
    let mut meta = SequenceMeta {
        seed: sample.meta.seed,
        config: sample.meta.config.clone(),
        instances: Vec::new(),
    };
    for (t, (sem, insts)) in sample.semantics.iter().zip(&sample.instances).enumerate() {
        labels_write(&sem.labels, &dir.join(format!("sem_{t:03}.png")))?;
        let mut frame_meta = Vec::new();
        for (j, inst) in insts.iter().enumerate() {
            let file = format!("inst_{t:03}_{j:02}.png");
            labels_write(&inst.mask, &dir.join(&file))?;
            frame_meta.push(InstanceMeta {
                id: inst.id,
                class_id: inst.class_id,
                score: inst.score,
                file,
            });
        }
        meta.instances.push(frame_meta);
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_manifest(out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(out_dir.join("manifest.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub fn load_sequence(out_dir: &Path, entry: &ManifestEntry) -> Result<SequenceSample> {
    let dir = out_dir.join(&entry.dir);
    let meta: SequenceMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let mut flows = Vec::with_capacity(entry.frames - 1);
    for i in 0..entry.frames - 1 {
        flows.push(flow_read(&dir.join(format!("flow_{i:03}.flo")))?);
    }
    let mut semantics = Vec::with_capacity(entry.frames);
    let mut instances = Vec::with_capacity(entry.frames);
    for (t, frame_meta) in meta.instances.iter().enumerate() {
        semantics.push(SemanticMap::new(labels_read(&dir.join(format!("sem_{t:03}.png")))?)?);
        let mut insts = Vec::new();
        for im in frame_meta {
            let mask = labels_read(&dir.join(&im.file))?;
            insts.push(InstanceMask::new(im.id, im.class_id, im.score, mask));
        }
        instances.push(insts);
    }
    let sample = SequenceSample {
        flows,
        instances,
        semantics,
        meta: SampleMeta {
            seed: meta.seed,
            config: meta.config,
        },
    };
    sample.validate()?;
    Ok(sample)
}

/// Convenience path used throughout tests and the harness: generate a split
/// in memory without touching disk.
pub fn generate_split(cfg: &SceneConfig, n_sequences: usize) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n_sequences {
        let mut scfg = cfg.clone();
        scfg.seed = cfg.seed + i as u64;
        let sample = generate(&scfg)?;
        if scfg.seed % 2 == 0 {
            train.push(sample);
        } else {
            val.push(sample);
        }
    }
    Ok((train, val))
}
