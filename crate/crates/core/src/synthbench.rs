//! Seeded synthetic tasks where low- and high-resolution experts hold
//! complementary advantages.
//!
//! Every sample is a 64x64 scene: a background from the eight corner
//! colors of the RGB cube, one 5x5 glyph in the complement color and
//! `k in 0..=4` gray 3x3 dots. The task asks for one of the three
//! attributes. Scenes are stored as compact records and rasterized on
//! demand.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::experts::Image;
use crate::model::ModelAssembly;
use crate::params::seeded;

pub const RESOLUTION: usize = 64;
pub const GLYPH_SIZE: usize = 5;
pub const DOT_SIZE: usize = 3;
pub const MAX_DOTS: usize = 4;
pub const N_COLORS: usize = 8;
pub const N_GLYPHS: usize = 16;
pub const N_COUNTS: usize = MAX_DOTS + 1;
pub const DOT_VALUE: f64 = 0.5;

/// Binary 5x5 masks, one string per row.
pub const GLYPHS: [[&str; 5]; N_GLYPHS] = [
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["..#..", ".##..", "..#..", "..#..", ".###."],
    ["####.", "....#", ".###.", "#....", "#####"],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#####", "#....", "####.", "#....", "#...."],
    ["#....", "#....", "#....", "#....", "#####"],
    ["#...#", "##.##", "#.#.#", "#...#", "#...#"],
    [".###.", "#...#", "#####", "#...#", "#...#"],
    ["#...#", "#...#", "#####", "#...#", "#...#"],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#...#", "#...#", "#...#", ".#.#.", "..#.."],
    ["#.#.#", ".#.#.", "#.#.#", ".#.#.", "#.#.#"],
    ["#####", "....#", "...#.", "..#..", ".#..."],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
    ["##...", "##...", ".....", "...##", "...##"],
];

pub fn glyph_on(glyph: usize, row: usize, col: usize) -> bool {
    GLYPHS[glyph][row].as_bytes()[col] == b'#'
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Color,
    Glyph,
    Count,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Color, Task::Glyph, Task::Count];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Task> {
        Task::ALL.get(id).copied()
    }

    pub fn n_classes(self) -> usize {
        match self {
            Task::Color => N_COLORS,
            Task::Glyph => N_GLYPHS,
            Task::Count => N_COUNTS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Color => "color",
            Task::Glyph => "glyph",
            Task::Count => "count",
        }
    }
}

/// Largest class count over all tasks; the answer vocabulary size.
pub const VOCAB: usize = N_GLYPHS;

/// Everything needed to rasterize one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    /// Bits `rgb`, e.g. 5 = (1, 0, 1).
    pub background: u8,
    pub glyph: u8,
    /// Top-left corner (row, col) of the glyph.
    pub glyph_pos: (u8, u8),
    /// Top-left corners of the dots.
    pub dots: Vec<(u8, u8)>,
}

pub fn palette(color: u8) -> [f64; 3] {
    [
        f64::from((color >> 2) & 1),
        f64::from((color >> 1) & 1),
        f64::from(color & 1),
    ]
}

impl Scene {
    pub fn render(&self) -> Image {
        let n = RESOLUTION;
        let bg = palette(self.background);
        let fg = palette(!self.background & 7);
        let mut data: Vec<f64> = bg.iter().copied().cycle().take(n * n * 3).collect();
        let mut put = |r: usize, c: usize, v: [f64; 3]| {
            data[(r * n + c) * 3..(r * n + c) * 3 + 3].copy_from_slice(&v);
        };
        let (gy, gx) = (self.glyph_pos.0 as usize, self.glyph_pos.1 as usize);
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                if glyph_on(self.glyph as usize, r, c) {
                    put(gy + r, gx + c, fg);
                }
            }
        }
        for &(dy, dx) in &self.dots {
            for r in 0..DOT_SIZE {
                for c in 0..DOT_SIZE {
                    put(dy as usize + r, dx as usize + c, [DOT_VALUE; 3]);
                }
            }
        }
        Image { resolution: n, data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub scene: Scene,
    pub task: Task,
    pub answer: usize,
}

impl Sample {
    pub fn image(&self) -> Image {
        self.scene.render()
    }
}

/// Boxes `[r, r+h) x [c, c+w)` overlap or touch (no one-pixel gap).
fn crowded(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    let (ar, ac, asz) = a;
    let (br, bc, bsz) = b;
    ar < br + bsz + 1 && br < ar + asz + 1 && ac < bc + bsz + 1 && bc < ac + asz + 1
}

/// `n` samples with tasks assigned round-robin (color, glyph, count, ...).
pub fn gen_dataset(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let background = rng.gen_range(0..N_COLORS as u8);
            let glyph = rng.gen_range(0..N_GLYPHS as u8);
            let span = (RESOLUTION - GLYPH_SIZE + 1) as u8;
            let glyph_pos = (rng.gen_range(0..span), rng.gen_range(0..span));
            let k = rng.gen_range(0..=MAX_DOTS);
            let mut boxes = vec![(glyph_pos.0 as usize, glyph_pos.1 as usize, GLYPH_SIZE)];
            let mut dots = Vec::with_capacity(k);
            let span = (RESOLUTION - DOT_SIZE + 1) as u8;
            while dots.len() < k {
                let d = (rng.gen_range(0..span), rng.gen_range(0..span));
                let b = (d.0 as usize, d.1 as usize, DOT_SIZE);
                if boxes.iter().all(|&o| !crowded(o, b)) {
                    boxes.push(b);
                    dots.push(d);
                }
            }
            let task = Task::ALL[i % 3];
            let answer = match task {
                Task::Color => background as usize,
                Task::Glyph => glyph as usize,
                Task::Count => k,
            };
            Sample {
                scene: Scene {
                    background,
                    glyph,
                    glyph_pos,
                    dots,
                },
                task,
                answer,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Indexed by [`Task::id`]; `None` when the dataset has no sample of that task.
    pub per_task: [Option<f64>; 3],
    pub macro_avg: f64,
}

impl EvalResult {
    pub fn accuracy(&self, task: Task) -> Option<f64> {
        self.per_task[task.id()]
    }
}

/// Argmax accuracy per task. The macro average is over tasks present in the dataset.
pub fn evaluate(model: &ModelAssembly, dataset: &[Sample]) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut hits = [0usize; 3];
    let mut seen = [0usize; 3];
    for s in dataset {
        let logits = model.logits(&s.image(), s.task.id())?;
        let mut best = 0;
        for (k, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = k;
            }
        }
        seen[s.task.id()] += 1;
        hits[s.task.id()] += usize::from(best == s.answer);
    }
    let per_task = [0, 1, 2].map(|t| (seen[t] > 0).then(|| hits[t] as f64 / seen[t] as f64));
    let present: Vec<f64> = per_task.iter().flatten().copied().collect();
    let macro_avg = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalResult { per_task, macro_avg })
}

pub const MAGIC: [u8; 4] = *b"VMSB";
pub const FORMAT_VERSION: u32 = 1;
/// task, answer, background, glyph, glyph row, glyph col, dot count, 4 x (row, col).
pub const RECORD_SIZE: usize = 7 + 2 * MAX_DOTS;

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + samples.len() * RECORD_SIZE);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        let sc = &s.scene;
        let mut rec = [0u8; RECORD_SIZE];
        rec[..7].copy_from_slice(&[
            s.task.id() as u8,
            s.answer as u8,
            sc.background,
            sc.glyph,
            sc.glyph_pos.0,
            sc.glyph_pos.1,
            sc.dots.len() as u8,
        ]);
        for (i, &(r, c)) in sc.dots.iter().enumerate() {
            rec[7 + 2 * i] = r;
            rec[8 + 2 * i] = c;
        }
        buf.extend_from_slice(&rec);
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    if buf.len() < 16 || buf[..4] != MAGIC {
        return Err(bad("not a synthbench dataset (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = &buf[16..];
    if body.len() != n * RECORD_SIZE {
        return Err(bad(format!(
            "expected {n} records of {RECORD_SIZE} bytes, found {} bytes",
            body.len()
        )));
    }
    body.chunks_exact(RECORD_SIZE)
        .enumerate()
        .map(|(i, rec)| {
            let task = Task::from_id(rec[0] as usize).ok_or_else(|| bad(format!("record {i}: bad task id")))?;
            let k = rec[6] as usize;
            if k > MAX_DOTS || rec[3] as usize >= N_GLYPHS || rec[2] as usize >= N_COLORS {
                return Err(bad(format!("record {i}: field out of range")));
            }
            if rec[1] as usize >= task.n_classes() {
                return Err(bad(format!("record {i}: answer out of range")));
            }
            let limit = (RESOLUTION - GLYPH_SIZE) as u8;
            let dot_limit = (RESOLUTION - DOT_SIZE) as u8;
            let dots: Vec<(u8, u8)> = (0..k).map(|d| (rec[7 + 2 * d], rec[8 + 2 * d])).collect();
            if rec[4] > limit || rec[5] > limit || dots.iter().any(|&(r, c)| r > dot_limit || c > dot_limit) {
                return Err(bad(format!("record {i}: position outside the image")));
            }
            Ok(Sample {
                scene: Scene {
                    background: rec[2],
                    glyph: rec[3],
                    glyph_pos: (rec[4], rec[5]),
                    dots,
                },
                task,
                answer: rec[1] as usize,
            })
        })
        .collect()
}
