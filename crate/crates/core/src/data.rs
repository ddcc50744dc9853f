//! Task data: synthetic pooling-recovery tasks, character image stores,
//! episode sampling, rotation augmentation and salt-and-pepper noise.
//!
//! Character datasets on disk use `<root>/<class>/<image>.png` with 8-bit
//! grayscale images, dark strokes on a light background. Loaded images are
//! inverted (strokes become 1), scaled to `[0, 1]` and area-averaged to the
//! working resolution. Classes are ordered by directory name, images by file
//! name.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis, IxDyn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{Task, TaskSet};
use crate::tensor::Array;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no class directories under {0}")]
    EmptyDataset(PathBuf),
    #[error("class {class:?} has {found} images, needs at least {needed}")]
    TooFewInstances {
        class: String,
        found: usize,
        needed: usize,
    },
    #[error("images must share extents: {0}")]
    Extents(String),
    #[error("rotation needs square images, got {0}×{1}")]
    NonSquare(usize, usize),
    #[error("noise ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Input/target pairs stacked along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    pub x: Array,
    pub y: Array,
}

/// `B×1×H×W` images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Array,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Length-`J` vectors pooled by size-2/stride-2 windows.
    OneD { inputs: usize },
    /// `H×W` images pooled by vertical 2×1 windows at every other column.
    TwoD { height: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: SyntheticKind,
    pub tasks: usize,
    pub sets_per_task: usize,
    pub train_per_task: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn one_d(tasks: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind: SyntheticKind::OneD { inputs: 60 },
            tasks,
            sets_per_task: 20,
            train_per_task: 1,
            seed,
        }
    }

    pub fn two_d(height: usize, width: usize, tasks: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind: SyntheticKind::TwoD { height, width },
            tasks,
            sets_per_task: 20,
            train_per_task: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SyntheticKind::OneD { inputs } if inputs == 0 || inputs % 2 != 0 => {
                return Err(DataError::Spec(format!("1D input length {inputs} must be even and positive")))
            }
            SyntheticKind::TwoD { height, width } if height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 => {
                return Err(DataError::Spec(format!("2D extents {height}×{width} must be even and positive")))
            }
            _ => {}
        }
        if self.train_per_task == 0 || self.train_per_task >= self.sets_per_task {
            return Err(DataError::Spec(format!(
                "{} training sets out of {} leaves no validation split",
                self.train_per_task, self.sets_per_task
            )));
        }
        Ok(())
    }
}

/// Ground-truth 1D pooling: pairs `(2k, 2k+1)`, max for the first half of
/// the outputs, mean for the second.
pub fn reference_pool_1d(x: &[f64]) -> Vec<f64> {
    let out = x.len() / 2;
    (0..out)
        .map(|k| {
            let (a, b) = (x[2 * k], x[2 * k + 1]);
            if k < out / 2 {
                a.max(b)
            } else {
                (a + b) / 2.0
            }
        })
        .collect()
}

/// Ground-truth 2D pooling: output `(r, c)` pools rows `2r, 2r+1` at column
/// `2c`; max in the top half of output rows, mean in the bottom half.
pub fn reference_pool_2d(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let (a, b) = (img[[2 * r, 2 * c]], img[[2 * r + 1, 2 * c]]);
        if r < oh / 2 {
            a.max(b)
        } else {
            (a + b) / 2.0
        }
    })
}

/// Binary ground-truth shape matrix of the 1D task (`J/2 × J`).
pub fn ground_truth_w_1d(inputs: usize) -> Array2<f64> {
    Array2::from_shape_fn((inputs / 2, inputs), |(i, j)| if j / 2 == i { 1.0 } else { 0.0 })
}

/// Ground-truth window pattern of the 2D task: left column of each 2×2 window
/// (raster order within the window).
pub const GROUND_TRUTH_WINDOW_2D: [f64; 4] = [1.0, 0.0, 1.0, 0.0];

/// Draws i.i.d. `Uniform[0, 1]` inputs and reference-pooled targets.
///
/// 1D: `x` is `S×J`, `y` is `S×J/2`. 2D: `x` is `S×1×H×W`, `y` is `S×1×H/2×W/2`.
pub fn gen_synthetic_tasks(spec: &SyntheticTaskSpec) -> Result<TaskSet<Regression>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tasks = Vec::with_capacity(spec.tasks);
    for id in 0..spec.tasks {
        let (x, y) = match spec.kind {
            SyntheticKind::OneD { inputs } => {
                let x = Array2::from_shape_fn((spec.sets_per_task, inputs), |_| rng.gen::<f64>());
                let mut y = Array2::zeros((spec.sets_per_task, inputs / 2));
                for (row, mut out) in x.axis_iter(Axis(0)).zip(y.axis_iter_mut(Axis(0))) {
                    out.assign(&ndarray::Array1::from(reference_pool_1d(row.as_slice().unwrap())));
                }
                (x.into_dyn(), y.into_dyn())
            }
            SyntheticKind::TwoD { height, width } => {
                let n = spec.sets_per_task;
                let x = Array::from_shape_fn(IxDyn(&[n, 1, height, width]), |_| rng.gen::<f64>());
                let mut y = Array::zeros(IxDyn(&[n, 1, height / 2, width / 2]));
                for s in 0..n {
                    let img = x.slice(s![s, 0, .., ..]).to_owned();
                    y.slice_mut(s![s, 0, .., ..]).assign(&reference_pool_2d(&img));
                }
                (x, y)
            }
        };
        let k = spec.train_per_task;
        let split = |a: &Array, lo: usize, hi: usize| a.slice_axis(Axis(0), (lo..hi).into()).to_owned();
        let n = spec.sets_per_task;
        tasks.push(Task {
            id,
            train: Regression { x: split(&x, 0, k), y: split(&y, 0, k) },
            val: Regression { x: split(&x, k, n), y: split(&y, k, n) },
        });
    }
    Ok(TaskSet { tasks })
}

/// Grayscale images grouped by class, pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassImageStore {
    pub classes: Vec<ClassImages>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<Array2<f64>>,
}

impl ClassImageStore {
    pub fn new(classes: Vec<ClassImages>) -> Result<Self> {
        let (height, width) = classes
            .iter()
            .flat_map(|c| c.images.first())
            .map(|i| i.dim())
            .next()
            .unwrap_or((0, 0));
        for c in &classes {
            if let Some(img) = c.images.iter().find(|i| i.dim() != (height, width)) {
                return Err(DataError::Extents(format!(
                    "class {:?} has a {}×{} image, expected {height}×{width}",
                    c.name,
                    img.nrows(),
                    img.ncols()
                )));
            }
        }
        Ok(ClassImageStore { classes, height, width })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }
}

/// Area-averaging resize: each output pixel is the mean of the source area it
/// covers, with fractional overlap at the borders.
pub fn resize_area(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    fn weights(from: usize, to: usize) -> Array2<f64> {
        let scale = from as f64 / to as f64;
        Array2::from_shape_fn((to, from), |(o, i)| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            overlap / scale
        })
    }
    let (h, w) = src.dim();
    if (h, w) == (height, width) {
        return src.clone();
    }
    weights(h, height).dot(src).dot(&weights(w, width).t())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `<root>/<class>/<image>.png`, inverting polarity and resizing.
pub fn load_character_dataset(root: &Path, height: usize, width: usize, min_instances: usize) -> Result<ClassImageStore> {
    let mut classes = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut images = Vec::new();
        for file in sorted_entries(&dir)? {
            if file.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
                continue;
            }
            let img = image::open(&file)
                .map_err(|source| DataError::Image { path: file.clone(), source })?
                .to_luma8();
            let (w, h) = img.dimensions();
            let raw = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                1.0 - img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
            });
            images.push(resize_area(&raw, height, width));
        }
        if images.len() < min_instances {
            return Err(DataError::TooFewInstances { class: name, found: images.len(), needed: min_instances });
        }
        classes.push(ClassImages { name, images });
    }
    if classes.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    ClassImageStore::new(classes)
}

/// Writes a store in the on-disk layout (dark strokes on light background).
pub fn write_character_dataset(store: &ClassImageStore, root: &Path) -> Result<()> {
    for class in &store.classes {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, img) in class.images.iter().enumerate() {
            let (h, w) = img.dim();
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
                image::Luma([((1.0 - img[[r as usize, c as usize]]).clamp(0.0, 1.0) * 255.0).round() as u8])
            });
            let path = dir.join(format!("{i:03}.png"));
            buf.save(&path).map_err(|source| DataError::Image { path, source })?;
        }
    }
    Ok(())
}

/// Deterministic disjoint split: `count` seeded-random classes for meta-training
/// (in their original order), the rest held out.
pub fn split_classes(store: &ClassImageStore, count: usize, seed: u64) -> Result<(ClassImageStore, ClassImageStore)> {
    if count > store.len() {
        return Err(DataError::Insufficient(format!("{count} meta-train classes requested of {}", store.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; store.len()];
    for i in index::sample(&mut rng, store.len(), count) {
        chosen[i] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (c, &pick) in store.classes.iter().zip(&chosen) {
        if pick { a.push(c.clone()) } else { b.push(c.clone()) }
    }
    let mk = |classes| ClassImageStore { classes, height: store.height, width: store.width };
    Ok((mk(a), mk(b)))
}

/// Clockwise quarter turn: `out[i][j] = src[H-1-j][i]`.
pub fn rotate90(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((w, h), |(i, j)| img[[h - 1 - j, i]])
}

/// Adds the 90°, 180° and 270° rotations of every class as new classes,
/// grouped per source class: `c, c@90, c@180, c@270`.
pub fn augment_rotations(store: &ClassImageStore) -> Result<ClassImageStore> {
    if store.height != store.width {
        return Err(DataError::NonSquare(store.height, store.width));
    }
    let mut classes = Vec::with_capacity(store.len() * 4);
    for class in &store.classes {
        let mut current = class.images.clone();
        classes.push(class.clone());
        for deg in [90, 180, 270] {
            current = current.iter().map(rotate90).collect();
            classes.push(ClassImages { name: format!("{}@{deg}", class.name), images: current.clone() });
        }
    }
    Ok(ClassImageStore { classes, height: store.height, width: store.width })
}

fn stack(images: &[&Array2<f64>], h: usize, w: usize) -> Array {
    let mut out = Array::zeros(IxDyn(&[images.len(), 1, h, w]));
    for (k, img) in images.iter().enumerate() {
        out.slice_mut(s![k, 0, .., ..]).assign(img);
    }
    out
}

/// Episode split as `(class, instance)` references into a store.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSplit<'a> {
    pub store: &'a ClassImageStore,
    pub picks: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl EpisodeSplit<'_> {
    pub fn materialize(&self) -> LabeledImages {
        let imgs: Vec<&Array2<f64>> = self.picks.iter().map(|&(c, i)| &self.store.classes[c].images[i]).collect();
        LabeledImages { images: stack(&imgs, self.store.height, self.store.width), labels: self.labels.clone() }
    }
}

/// Samples a `way`-way episode: `shot` training and `queries` validation
/// images per class, disjoint, labels re-indexed `0..way` in sampling order.
pub fn sample_episode_split(
    store: &ClassImageStore,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    id: usize,
) -> Result<Task<EpisodeSplit<'_>>> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(DataError::Insufficient("way, shot and queries must be positive".into()));
    }
    if store.len() < way {
        return Err(DataError::Insufficient(format!("{way}-way episode from {} classes", store.len())));
    }
    let need = shot + queries;
    if let Some(c) = store.classes.iter().find(|c| c.images.len() < need) {
        return Err(DataError::TooFewInstances { class: c.name.clone(), found: c.images.len(), needed: need });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut tr_l, mut va_l) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, c) in index::sample(&mut rng, store.len(), way).into_iter().enumerate() {
        let picks = index::sample(&mut rng, store.classes[c].images.len(), need).into_vec();
        for (k, &i) in picks.iter().enumerate() {
            if k < shot {
                tr.push((c, i));
                tr_l.push(label);
            } else {
                va.push((c, i));
                va_l.push(label);
            }
        }
    }
    Ok(Task {
        id,
        train: EpisodeSplit { store, picks: tr, labels: tr_l },
        val: EpisodeSplit { store, picks: va, labels: va_l },
    })
}

/// [`sample_episode_split`] with the images stacked into `B×1×H×W`.
pub fn sample_episode(
    store: &ClassImageStore,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    id: usize,
) -> Result<Task<LabeledImages>> {
    let t = sample_episode_split(store, way, shot, queries, seed, id)?;
    Ok(Task { id, train: t.train.materialize(), val: t.val.materialize() })
}

/// `count` episodes with seeds drawn from `seed`; class tuples may repeat.
pub fn sample_episodes(
    store: &ClassImageStore,
    way: usize,
    shot: usize,
    queries: usize,
    count: usize,
    seed: u64,
) -> Result<TaskSet<EpisodeSplit<'_>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = (0..count)
        .map(|id| sample_episode_split(store, way, shot, queries, rng.gen(), id))
        .collect::<Result<_>>()?;
    Ok(TaskSet { tasks })
}

/// With probability `ratio` each pixel becomes 0 or 1 (equally likely).
pub fn add_salt_pepper(image: &Array, ratio: f64, seed: u64) -> Result<Array> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(image.mapv(|v| {
        let replace = rng.gen::<f64>() < ratio;
        let salt = rng.gen::<bool>();
        if replace {
            if salt { 1.0 } else { 0.0 }
        } else {
            v
        }
    }))
}

/// Bundled synthetic glyphs: each class is a few random polylines; each
/// instance jitters the control points and the placement, is rendered at 4×
/// resolution and area-averaged down. Strokes are 1, background 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub classes: usize,
    pub instances: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn generate_glyphs(spec: &GlyphSpec) -> Result<ClassImageStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = (0..spec.classes)
        .map(|c| {
            let strokes: Vec<Vec<(f64, f64)>> = (0..rng.gen_range(2..=3))
                .map(|_| (0..rng.gen_range(2..=4)).map(|_| (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85))).collect())
                .collect();
            let images = (0..spec.instances)
                .map(|_| {
                    let (dx, dy) = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
                    let scale = rng.gen_range(0.9..1.1);
                    let jittered: Vec<Vec<(f64, f64)>> = strokes
                        .iter()
                        .map(|s| {
                            s.iter()
                                .map(|&(x, y)| {
                                    let x = 0.5 + (x - 0.5) * scale + dx + rng.gen_range(-0.04..0.04);
                                    let y = 0.5 + (y - 0.5) * scale + dy + rng.gen_range(-0.04..0.04);
                                    (x, y)
                                })
                                .collect()
                        })
                        .collect();
                    render_strokes(&jittered, spec.size)
                })
                .collect();
            ClassImages { name: format!("glyph{c:04}"), images }
        })
        .collect();
    ClassImageStore::new(classes)
}

fn render_strokes(strokes: &[Vec<(f64, f64)>], size: usize) -> Array2<f64> {
    let hi = size * 4;
    let half_width = 0.045;
    let canvas = Array2::from_shape_fn((hi, hi), |(r, c)| {
        let p = ((c as f64 + 0.5) / hi as f64, (r as f64 + 0.5) / hi as f64);
        let hit = strokes.iter().any(|s| s.windows(2).any(|seg| segment_distance(p, seg[0], seg[1]) <= half_width));
        if hit { 1.0 } else { 0.0 }
    });
    resize_area(&canvas, size, size)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (qx * qx + qy * qy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn reference_1d_examples() {
        let mut x = vec![0.5; 60];
        x[0] = 0.2;
        x[1] = 0.8;
        x[58] = 0.2;
        x[59] = 0.8;
        let y = reference_pool_1d(&x);
        assert_eq!(y.len(), 30);
        assert_eq!(y[0], 0.8);
        assert_eq!(y[29], 0.5);
    }

    #[test]
    fn synthetic_counts_and_targets() {
        let set = gen_synthetic_tasks(&SyntheticTaskSpec::one_d(8, 1)).unwrap();
        assert_eq!(set.len(), 8);
        let t = &set.tasks[3];
        assert_eq!(t.train.x.shape(), &[1, 60]);
        assert_eq!(t.val.x.shape(), &[19, 60]);
        assert_eq!(t.val.y.shape(), &[19, 30]);
        for (x, y) in t.val.x.axis_iter(Axis(0)).zip(t.val.y.axis_iter(Axis(0))) {
            let x: Vec<f64> = x.iter().copied().collect();
            assert_eq!(y.iter().copied().collect::<Vec<_>>(), reference_pool_1d(&x));
        }
        assert!(t.val.x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_2d_shapes() {
        let set = gen_synthetic_tasks(&SyntheticTaskSpec::two_d(12, 12, 2, 0)).unwrap();
        assert_eq!(set.tasks[0].val.x.shape(), &[19, 1, 12, 12]);
        assert_eq!(set.tasks[0].val.y.shape(), &[19, 1, 6, 6]);
        assert!(gen_synthetic_tasks(&SyntheticTaskSpec::two_d(11, 12, 2, 0)).is_err());
    }

    #[test]
    fn reference_2d_uses_left_column() {
        let img = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let y = reference_pool_2d(&img);
        assert_eq!(y, arr2(&[[4.0, 6.0], [10.0, 12.0]]));
    }

    #[test]
    fn rotation_examples() {
        let img = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64);
        let r = rotate90(&img);
        assert_eq!(r[[0, 0]], img[[2, 0]]);
        assert_eq!(rotate90(&rotate90(&rotate90(&r))), img);
        let store = ClassImageStore::new(vec![ClassImages { name: "a".into(), images: vec![img] }]).unwrap();
        assert_eq!(augment_rotations(&store).unwrap().len(), 4);
        let wide = ClassImageStore::new(vec![ClassImages { name: "b".into(), images: vec![Array2::zeros((2, 3))] }]).unwrap();
        assert!(matches!(augment_rotations(&wide), Err(DataError::NonSquare(2, 3))));
    }

    fn toy_store(classes: usize, instances: usize) -> ClassImageStore {
        generate_glyphs(&GlyphSpec { classes, instances, size: 8, seed: 2 }).unwrap()
    }

    #[test]
    fn split_examples() {
        let store = toy_store(10, 2);
        let (a, b) = split_classes(&store, 7, 5).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        let (a2, _) = split_classes(&store, 7, 5).unwrap();
        assert_eq!(a, a2);
        let mut all: Vec<&str> = a.names().into_iter().chain(b.names()).collect();
        all.sort();
        assert_eq!(all, store.names());
        assert!(split_classes(&store, 11, 0).is_err());
    }

    #[test]
    fn episode_examples() {
        let store = toy_store(8, 20);
        let t = sample_episode(&store, 5, 1, 19, 3, 0).unwrap();
        assert_eq!((t.train.labels.len(), t.val.labels.len()), (5, 95));
        assert_eq!(t.train.images.shape(), &[5, 1, 8, 8]);
        let t = sample_episode(&store, 5, 5, 15, 3, 0).unwrap();
        assert_eq!((t.train.labels.len(), t.val.labels.len()), (25, 75));
        assert_eq!(t, sample_episode(&store, 5, 5, 15, 3, 0).unwrap());
        assert!(t.train.labels.iter().chain(&t.val.labels).all(|&l| l < 5));
        assert!(sample_episode(&store, 9, 1, 1, 0, 0).is_err());
        assert!(sample_episode(&store, 5, 1, 20, 0, 0).is_err());
    }

    #[test]
    fn episodes_never_leak() {
        // Each image is unique, so identical pixels in both splits would mean overlap.
        let classes = (0..6)
            .map(|c| ClassImages {
                name: format!("c{c}"),
                images: (0..10).map(|i| Array2::from_elem((2, 2), (c * 10 + i) as f64 / 100.0)).collect(),
            })
            .collect();
        let store = ClassImageStore::new(classes).unwrap();
        for seed in 0..20 {
            let t = sample_episode(&store, 5, 2, 3, seed, 0).unwrap();
            let ids = |d: &LabeledImages| -> Vec<u64> { d.images.axis_iter(Axis(0)).map(|i| (i[[0, 0, 0]] * 100.0).round() as u64).collect() };
            let tr = ids(&t.train);
            assert!(ids(&t.val).iter().all(|v| !tr.contains(v)));
        }
    }

    #[test]
    fn salt_pepper_examples() {
        let img = Array::from_elem(IxDyn(&[28, 28]), 0.5);
        assert_eq!(add_salt_pepper(&img, 0.0, 1).unwrap(), img);
        assert!(add_salt_pepper(&img, 1.0, 1).unwrap().iter().all(|&v| v == 0.0 || v == 1.0));
        let (mean, sd) = (392.0, (784.0f64 * 0.25).sqrt());
        for seed in 0..20 {
            let n = add_salt_pepper(&img, 0.5, seed).unwrap().iter().filter(|&&v| v != 0.5).count() as f64;
            assert!((n - mean).abs() <= 3.0 * sd, "seed {seed}: {n}");
        }
        assert_eq!(add_salt_pepper(&img, 0.3, 9).unwrap(), add_salt_pepper(&img, 0.3, 9).unwrap());
        assert!(matches!(add_salt_pepper(&img, 1.5, 0), Err(DataError::InvalidRatio(_))));
    }

    #[test]
    fn resize_area_averages() {
        let src = arr2(&[[1.0, 3.0], [5.0, 7.0]]);
        assert_eq!(resize_area(&src, 1, 1), arr2(&[[4.0]]));
        let big = Array2::from_elem((10, 10), 0.25);
        assert!(resize_area(&big, 3, 3).iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn glyphs_are_deterministic_and_in_range() {
        let a = toy_store(3, 4);
        assert_eq!(a, toy_store(3, 4));
        assert!(a.classes.iter().flat_map(|c| &c.images).flat_map(|i| i.iter()).all(|v| (0.0..=1.0).contains(v)));
        assert!(a.classes[0].images[0].sum() > 0.0);
    }
}
