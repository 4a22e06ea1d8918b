//! Feature-table ingestion, synthetic data generation, seen/unseen split
//! construction, and class-balanced batch sampling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor2D;
use crate::numerics::Rng;
use crate::zsl::Mode;

/// Visual instances plus one semantic descriptor per class.
///
/// Class ids are dense `0..C-1`; the original file ids are retained in
/// `original_ids` for error messages and round trips.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    visual: Tensor2D,
    labels: Vec<usize>,
    descriptors: Tensor2D,
    original_ids: Vec<i64>,
    per_class: Vec<Vec<usize>>,
}

impl FeatureTable {
    pub fn new(
        visual_rows: Vec<(i64, Vec<f64>)>,
        descriptor_rows: Vec<(i64, Vec<f64>)>,
    ) -> Result<Self> {
        if descriptor_rows.is_empty() {
            return Err(Error::Data("no class descriptors".into()));
        }
        if visual_rows.is_empty() {
            return Err(Error::Data("no visual instances".into()));
        }
        let mut original_ids: Vec<i64> = descriptor_rows.iter().map(|(id, _)| *id).collect();
        original_ids.sort_unstable();
        for pair in original_ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Data(format!(
                    "duplicate descriptor for class {}",
                    pair[0]
                )));
            }
        }
        let dense: BTreeMap<i64, usize> = original_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();

        let sem_dim = descriptor_rows[0].1.len();
        let mut desc = Tensor2D::zeros(original_ids.len(), sem_dim);
        for (id, row) in &descriptor_rows {
            if row.len() != sem_dim {
                return Err(Error::Data(format!(
                    "descriptor for class {id} has {} values, expected {sem_dim}",
                    row.len()
                )));
            }
            desc.row_mut(dense[id]).copy_from_slice(row);
        }

        let vis_dim = visual_rows[0].1.len();
        let mut visual = Tensor2D::zeros(visual_rows.len(), vis_dim);
        let mut labels = Vec::with_capacity(visual_rows.len());
        for (i, (id, row)) in visual_rows.iter().enumerate() {
            if row.len() != vis_dim {
                return Err(Error::Data(format!(
                    "visual row {i} has {} values, expected {vis_dim}",
                    row.len()
                )));
            }
            let Some(&label) = dense.get(id) else {
                return Err(Error::Data(format!(
                    "visual instance {i} is labeled class {id}, which has no descriptor"
                )));
            };
            visual.row_mut(i).copy_from_slice(row);
            labels.push(label);
        }

        let mut per_class = vec![Vec::new(); original_ids.len()];
        for (i, &l) in labels.iter().enumerate() {
            per_class[l].push(i);
        }
        Ok(FeatureTable {
            visual,
            labels,
            descriptors: desc,
            original_ids,
            per_class,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.visual.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn visual(&self) -> &Tensor2D {
        &self.visual
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn descriptors(&self) -> &Tensor2D {
        &self.descriptors
    }

    pub fn original_id(&self, class: usize) -> i64 {
        self.original_ids[class]
    }

    /// Instance indices of one class, in table order.
    pub fn instances_of(&self, class: usize) -> &[usize] {
        &self.per_class[class]
    }

    pub fn visual_rows(&self, indices: &[usize]) -> Result<Tensor2D> {
        self.visual.gather_rows(indices)
    }

    pub fn descriptor_rows(&self, classes: &[usize]) -> Result<Tensor2D> {
        self.descriptors.gather_rows(classes)
    }
}

// ── CSV and binary file formats ─────────────────────────────────────

fn write_csv(path: &Path, dim: usize, rows: impl Iterator<Item = (i64, Vec<f64>)>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "class_id")?;
    for j in 0..dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (id, row) in rows {
        write!(w, "{id}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_csv(path: &Path) -> Result<Vec<(i64, Vec<f64>)>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            let mut fields = line.split(',');
            if fields.next() != Some("class_id") {
                return Err(Error::Format {
                    line: lineno,
                    msg: "header must start with 'class_id'".into(),
                });
            }
            let mut dim = 0;
            for (j, f) in fields.enumerate() {
                if f != format!("f{j}") {
                    return Err(Error::Format {
                        line: lineno,
                        msg: format!("expected column 'f{j}', found '{f}'"),
                    });
                }
                dim = j + 1;
            }
            if dim == 0 {
                return Err(Error::Format {
                    line: lineno,
                    msg: "header declares no feature columns".into(),
                });
            }
            width = Some(dim);
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let dim = width.expect("header parsed first");
        let mut fields = line.split(',');
        let id_text = fields.next().unwrap_or("");
        let id: i64 = id_text.parse().map_err(|_| Error::Format {
            line: lineno,
            msg: format!("bad class id '{id_text}'"),
        })?;
        let mut feats = Vec::with_capacity(dim);
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::Format {
                line: lineno,
                msg: format!("bad float '{f}'"),
            })?;
            feats.push(v);
        }
        if feats.len() != dim {
            return Err(Error::Format {
                line: lineno,
                msg: format!("row has {} feature values, header declares {dim}", feats.len()),
            });
        }
        rows.push((id, feats));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} contains no data rows", path.display())));
    }
    Ok(rows)
}

const BINARY_MAGIC: &[u8; 4] = b"XAFT";
const BINARY_VERSION: u32 = 1;

fn write_binary(path: &Path, dim: usize, rows: &[(i64, Vec<f64>)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    for (id, row) in rows {
        w.write_all(&id.to_le_bytes())?;
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_binary(path: &Path) -> Result<Vec<(i64, Vec<f64>)>> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != BINARY_MAGIC {
        return Err(Error::Data(format!("{}: not a feature file", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(Error::Data(format!("{}: unsupported version {version}", path.display())));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;
    let record = 8 + 8 * dim;
    if body.len() != rows * record {
        return Err(Error::Data(format!(
            "{}: expected {} bytes of records, found {}",
            path.display(),
            rows * record,
            body.len()
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let base = r * record;
        let id = i64::from_le_bytes(body[base..base + 8].try_into().unwrap());
        let mut feats = Vec::with_capacity(dim);
        for j in 0..dim {
            let o = base + 8 + 8 * j;
            feats.push(f64::from_le_bytes(body[o..o + 8].try_into().unwrap()));
        }
        out.push((id, feats));
    }
    Ok(out)
}

fn parse_any(path: &Path) -> Result<Vec<(i64, Vec<f64>)>> {
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        parse_binary(path)
    } else {
        parse_csv(path)
    }
}

/// Loads and validates a feature table from a visual file and a descriptor
/// file (CSV by default, binary for `.bin` paths).
pub fn load_features(visual_path: &Path, descriptor_path: &Path) -> Result<FeatureTable> {
    FeatureTable::new(parse_any(visual_path)?, parse_any(descriptor_path)?)
}

/// Writes the table as a visual/descriptor file pair; the format follows
/// each path's extension.
pub fn save_features(
    table: &FeatureTable,
    visual_path: &Path,
    descriptor_path: &Path,
) -> Result<()> {
    let visual_rows: Vec<(i64, Vec<f64>)> = (0..table.num_instances())
        .map(|i| (table.original_id(table.labels[i]), table.visual.row(i).to_vec()))
        .collect();
    let desc_rows: Vec<(i64, Vec<f64>)> = (0..table.num_classes())
        .map(|c| (table.original_id(c), table.descriptors.row(c).to_vec()))
        .collect();
    for (path, dim, rows) in [
        (visual_path, table.visual_dim(), visual_rows),
        (descriptor_path, table.semantic_dim(), desc_rows),
    ] {
        if path.extension().and_then(|e| e.to_str()) == Some("bin") {
            write_binary(path, dim, &rows)?;
        } else {
            write_csv(path, dim, rows.into_iter())?;
        }
    }
    Ok(())
}

// ── Synthetic generation ────────────────────────────────────────────

/// Settings for the synthetic cross-modal dataset.
///
/// Per class a latent concept vector is drawn; the semantic descriptor and
/// the visual prototype are fixed linear images of that concept, so the
/// cross-modal relation is learnable by construction. `inter_class_sim`
/// mixes all concepts toward one shared direction, `intra_class_std`
/// spreads instances around their prototype, and `label_noise_rate`
/// relabels a fixed fraction of instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub concept_dim: usize,
    pub intra_class_std: f64,
    pub inter_class_sim: f64,
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 20,
            instances_per_class: 100,
            visual_dim: 32,
            semantic_dim: 16,
            concept_dim: 8,
            intra_class_std: 1.0,
            inter_class_sim: 0.6,
            label_noise_rate: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("instances_per_class", self.instances_per_class),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("concept_dim", self.concept_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.inter_class_sim) {
            return Err(Error::Config(format!(
                "inter_class_sim must be in [0, 1), got {}",
                self.inter_class_sim
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Config(format!(
                "label_noise_rate must be in [0, 1), got {}",
                self.label_noise_rate
            )));
        }
        if !(self.intra_class_std >= 0.0) {
            return Err(Error::Config(format!(
                "intra_class_std must be non-negative, got {}",
                self.intra_class_std
            )));
        }
        Ok(())
    }
}

fn linear_map(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2D {
    let scale = 1.0 / (cols as f64).sqrt();
    let mut t = rng.normal_tensor(rows, cols);
    for v in t.data_mut() {
        *v *= scale;
    }
    t
}

/// Generates a synthetic feature table, fully determined by `cfg.seed`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<FeatureTable> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut concept_rng = root.derive(10);
    let mut map_rng = root.derive(11);
    let mut instance_rng = root.derive(12);
    let mut label_rng = root.derive(13);
    let mut descriptor_rng = root.derive(14);

    let d = cfg.concept_dim;
    // Shared direction toward which all class concepts are pulled.
    let mut global = (0..d).map(|_| concept_rng.normal()).collect::<Vec<f64>>();
    let norm = global.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut global {
        *v /= norm;
    }
    let sim = cfg.inter_class_sim;
    let pull = sim * (d as f64).sqrt();

    let mut concepts = Tensor2D::zeros(cfg.num_classes, d);
    for c in 0..cfg.num_classes {
        for (j, slot) in concepts.row_mut(c).iter_mut().enumerate() {
            *slot = (1.0 - sim) * concept_rng.normal() + pull * global[j];
        }
    }

    let visual_map = linear_map(&mut map_rng, cfg.visual_dim, d);
    let semantic_map = linear_map(&mut map_rng, cfg.semantic_dim, d);

    // Descriptors: linear image of the concept plus small noise.
    let mut descriptor_rows = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let concept = concepts.row(c);
        let mut s = vec![0.0; cfg.semantic_dim];
        for (i, slot) in s.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &cv) in concept.iter().enumerate() {
                acc += semantic_map.get(i, j) * cv;
            }
            *slot = acc + 0.01 * descriptor_rng.normal();
        }
        descriptor_rows.push((c as i64, s));
    }

    // Instances: prototype plus isotropic noise, grouped by class.
    let total = cfg.num_classes * cfg.instances_per_class;
    let mut visual_rows = Vec::with_capacity(total);
    for c in 0..cfg.num_classes {
        let concept = concepts.row(c);
        let mut proto = vec![0.0; cfg.visual_dim];
        for (i, slot) in proto.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &cv) in concept.iter().enumerate() {
                acc += visual_map.get(i, j) * cv;
            }
            *slot = acc;
        }
        for _ in 0..cfg.instances_per_class {
            let row: Vec<f64> = proto
                .iter()
                .map(|&p| p + cfg.intra_class_std * instance_rng.normal())
                .collect();
            visual_rows.push((c as i64, row));
        }
    }

    // Relabel exactly round(rate * total) instances to a different class.
    let flips = (cfg.label_noise_rate * total as f64).round() as usize;
    if flips > 0 && cfg.num_classes > 1 {
        for idx in label_rng.choose_distinct(total, flips) {
            let old = visual_rows[idx].0;
            let offset = 1 + label_rng.below(cfg.num_classes - 1) as i64;
            visual_rows[idx].0 = (old + offset) % cfg.num_classes as i64;
        }
    }

    FeatureTable::new(visual_rows, descriptor_rows)
}

// ── Seen/unseen splits ──────────────────────────────────────────────

/// One seen/unseen class partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// `(seen, unseen)` class counts.
    pub ratio: (usize, usize),
    pub split_index: usize,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Per-class fraction of seen instances used for training under GZSL.
    pub gzsl_train_fraction: f64,
}

pub const DEFAULT_GZSL_TRAIN_FRACTION: f64 = 0.75;

impl SplitSpec {
    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.binary_search(&class).is_ok()
    }

    /// GZSL training prefix length for a class with `n` instances.
    fn gzsl_train_count(&self, n: usize) -> usize {
        (self.gzsl_train_fraction * n as f64).floor() as usize
    }

    /// Training instances per seen class: every instance under ZSL, the
    /// per-class training prefix under GZSL.
    pub fn train_instances(&self, table: &FeatureTable, mode: Mode) -> BTreeMap<usize, Vec<usize>> {
        let mut out = BTreeMap::new();
        for &c in &self.seen {
            let all = table.instances_of(c);
            let take = match mode {
                Mode::Zsl => all.len(),
                Mode::Gzsl => self.gzsl_train_count(all.len()),
            };
            out.insert(c, all[..take].to_vec());
        }
        out
    }

    /// Held-out seen-class instances (GZSL only; empty under ZSL).
    pub fn seen_test_instances(&self, table: &FeatureTable, mode: Mode) -> Vec<usize> {
        match mode {
            Mode::Zsl => Vec::new(),
            Mode::Gzsl => {
                let mut out = Vec::new();
                for &c in &self.seen {
                    let all = table.instances_of(c);
                    out.extend_from_slice(&all[self.gzsl_train_count(all.len())..]);
                }
                out
            }
        }
    }

    /// Every instance of every unseen class.
    pub fn unseen_test_instances(&self, table: &FeatureTable) -> Vec<usize> {
        let mut out = Vec::new();
        for &c in &self.unseen {
            out.extend_from_slice(table.instances_of(c));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Draws `num_splits` pairwise-distinct seen/unseen partitions.
pub fn make_splits(
    num_classes: usize,
    ratio: (usize, usize),
    num_splits: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    let (seen_count, unseen_count) = ratio;
    if seen_count + unseen_count != num_classes {
        return Err(Error::Config(format!(
            "ratio {seen_count}/{unseen_count} does not sum to {num_classes} classes"
        )));
    }
    if seen_count == 0 || unseen_count == 0 {
        return Err(Error::Config("both split sides must be non-empty".into()));
    }
    if num_splits == 0 {
        return Err(Error::Config("num_splits must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut splits: Vec<SplitSpec> = Vec::with_capacity(num_splits);
    let mut attempts = 0;
    while splits.len() < num_splits {
        attempts += 1;
        if attempts > 1000 * num_splits {
            return Err(Error::Config(format!(
                "could not draw {num_splits} distinct splits at ratio {seen_count}/{unseen_count}"
            )));
        }
        let mut classes: Vec<usize> = (0..num_classes).collect();
        rng.shuffle(&mut classes);
        let mut seen = classes[..seen_count].to_vec();
        let mut unseen = classes[seen_count..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();
        if splits.iter().any(|s| s.seen == seen) {
            continue;
        }
        splits.push(SplitSpec {
            ratio,
            split_index: splits.len(),
            seen,
            unseen,
            gzsl_train_fraction: DEFAULT_GZSL_TRAIN_FRACTION,
        });
    }
    Ok(splits)
}

// ── Batch sampling ──────────────────────────────────────────────────

/// Per-class training index pool for one run.
#[derive(Clone, Debug)]
pub struct TrainPool {
    per_class: BTreeMap<usize, Vec<usize>>,
    total: usize,
}

impl TrainPool {
    pub fn new(table: &FeatureTable, split: &SplitSpec, mode: Mode) -> Self {
        let per_class = split.train_instances(table, mode);
        let total = per_class.values().map(Vec::len).sum();
        TrainPool { per_class, total }
    }

    pub fn total_instances(&self) -> usize {
        self.total
    }

    pub fn classes(&self) -> impl Iterator<Item = (&usize, &Vec<usize>)> {
        self.per_class.iter()
    }

    /// Steps per epoch: cover the pool once in expectation.
    pub fn steps_per_epoch(&self, c: usize, k: usize) -> usize {
        self.total.div_ceil(c * k).max(1)
    }
}

/// A class-balanced training batch: `c` distinct classes, `k` instances
/// each, plus the `c` descriptors in ascending class order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub visual: Tensor2D,
    /// Semantic-row index of each visual row.
    pub labels: Vec<usize>,
    /// Dense class id of each semantic row, ascending.
    pub class_ids: Vec<usize>,
    pub descriptors: Tensor2D,
}

/// Samples `c` distinct eligible classes uniformly, then `k` instances per
/// class without replacement.
pub fn sample_batch(
    table: &FeatureTable,
    pool: &TrainPool,
    c: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if c == 0 || k == 0 {
        return Err(Error::Sampling("batch shape c and k must be at least 1".into()));
    }
    let eligible: Vec<usize> = pool
        .per_class
        .iter()
        .filter(|(_, v)| v.len() >= k)
        .map(|(&cls, _)| cls)
        .collect();
    if eligible.len() < c {
        return Err(Error::Sampling(format!(
            "need {c} classes with at least {k} training instances, only {} qualify",
            eligible.len()
        )));
    }
    let mut chosen: Vec<usize> = rng
        .choose_distinct(eligible.len(), c)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();

    let mut indices = Vec::with_capacity(c * k);
    let mut labels = Vec::with_capacity(c * k);
    for (row, &cls) in chosen.iter().enumerate() {
        let candidates = &pool.per_class[&cls];
        for pick in rng.choose_distinct(candidates.len(), k) {
            indices.push(candidates[pick]);
            labels.push(row);
        }
    }
    Ok(Batch {
        visual: table.visual_rows(&indices)?,
        labels,
        descriptors: table.descriptor_rows(&chosen)?,
        class_ids: chosen,
    })
}
