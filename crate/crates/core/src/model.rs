//! IT-RNN and DT-RNN next-item models.
//!
//! IT-RNN: item embedding → GRU → fully connected softmax over items.
//! DT-RNN adds a dwell path: dwell-bucket embedding → GRU, whose output at
//! each step is concatenated (dwell part first) with the item embedding of
//! the same step before entering the item GRU.
//!
//! Batches are left-padded to `max_len`. Index 0 of both embedding tables is
//! reserved for padding and real ids are shifted by one. Padding positions
//! are never fed to the recurrent cells: each row starts from a zero state at
//! its first real position, so a padded row computes exactly what the
//! unpadded sequence would. The output layer only covers real items, so the
//! pad index can never be ranked.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    affine_softmax, affine_softmax_xent, embedding_backward, embedding_forward, gru_backward, gru_forward, GruCell,
    GruTrace, Param, ParamSet, Tensor2,
};
use crate::preprocess::Example;

pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItRnnConfig {
    pub num_items: usize,
    pub item_em_size: usize,
    pub it_rnn_size: usize,
    pub max_len: usize,
}

impl ItRnnConfig {
    pub fn new(num_items: usize) -> Self {
        ItRnnConfig {
            num_items,
            item_em_size: 128,
            it_rnn_size: 128,
            max_len: 15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtRnnConfig {
    pub base: ItRnnConfig,
    pub dt_em_size: usize,
    pub dt_rnn_size: usize,
    pub dwell_bucket_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    ItRnn(ItRnnConfig),
    DtRnn(DtRnnConfig),
}

impl ModelConfig {
    pub fn base(&self) -> &ItRnnConfig {
        match self {
            ModelConfig::ItRnn(c) => c,
            ModelConfig::DtRnn(c) => &c.base,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::ItRnn(_) => ModelKind::ItRnn,
            ModelConfig::DtRnn(_) => ModelKind::DtRnn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.base();
        let mut sizes = vec![
            ("num_items", b.num_items),
            ("item_em_size", b.item_em_size),
            ("it_rnn_size", b.it_rnn_size),
            ("max_len", b.max_len),
        ];
        if let ModelConfig::DtRnn(d) = self {
            sizes.push(("dt_em_size", d.dt_em_size));
            sizes.push(("dt_rnn_size", d.dt_rnn_size));
            sizes.push(("dwell_bucket_count", d.dwell_bucket_count));
        }
        match sizes.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be >= 1"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ItRnn,
    DtRnn,
}

/// Vocabulary-independent model hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub item_em_size: usize,
    pub it_rnn_size: usize,
    pub dt_em_size: usize,
    pub dt_rnn_size: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::DtRnn,
            item_em_size: 128,
            it_rnn_size: 128,
            dt_em_size: 16,
            dt_rnn_size: 8,
        }
    }
}

impl ModelSpec {
    pub fn it_rnn(item_em_size: usize, it_rnn_size: usize) -> Self {
        ModelSpec {
            kind: ModelKind::ItRnn,
            item_em_size,
            it_rnn_size,
            ..Default::default()
        }
    }

    pub fn dt_rnn(item_em_size: usize, it_rnn_size: usize, dt_em_size: usize, dt_rnn_size: usize) -> Self {
        ModelSpec {
            kind: ModelKind::DtRnn,
            item_em_size,
            it_rnn_size,
            dt_em_size,
            dt_rnn_size,
        }
    }

    pub fn config(&self, num_items: usize, dwell_bucket_count: usize, max_len: usize) -> ModelConfig {
        let base = ItRnnConfig {
            num_items,
            item_em_size: self.item_em_size,
            it_rnn_size: self.it_rnn_size,
            max_len,
        };
        match self.kind {
            ModelKind::ItRnn => ModelConfig::ItRnn(base),
            ModelKind::DtRnn => ModelConfig::DtRnn(DtRnnConfig {
                base,
                dt_em_size: self.dt_em_size,
                dt_rnn_size: self.dt_rnn_size,
                dwell_bucket_count,
            }),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::ItRnn => format!("it_rnn(em={},rnn={})", self.item_em_size, self.it_rnn_size),
            ModelKind::DtRnn => format!(
                "dt_rnn(em={},rnn={},dt_em={},dt_rnn={})",
                self.item_em_size, self.it_rnn_size, self.dt_em_size, self.dt_rnn_size
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwellPath {
    pub embedding: Param,
    pub gru: GruCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `(num_items + 1) × item_em_size`, row 0 is padding.
    pub item_embedding: Param,
    pub item_gru: GruCell,
    pub dwell: Option<DwellPath>,
    pub out_w: Param,
    pub out_b: Param,
}

impl ParamSet for ModelParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.item_embedding];
        v.extend(self.item_gru.params());
        if let Some(d) = &self.dwell {
            v.push(&d.embedding);
            v.extend(d.gru.params());
        }
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.item_embedding];
        v.extend(self.item_gru.params_mut());
        if let Some(d) = &mut self.dwell {
            v.push(&mut d.embedding);
            v.extend(d.gru.params_mut());
        }
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let b = *config.base();
        let (dwell, item_in) = match config {
            ModelConfig::ItRnn(_) => (None, b.item_em_size),
            ModelConfig::DtRnn(d) => (
                Some(DwellPath {
                    embedding: Param::zeros("dwell_embedding", d.dwell_bucket_count + 1, d.dt_em_size),
                    gru: GruCell::zeros("dwell_gru", d.dt_em_size, d.dt_rnn_size),
                }),
                d.dt_rnn_size + b.item_em_size,
            ),
        };
        ModelParams {
            config,
            item_embedding: Param::zeros("item_embedding", b.num_items + 1, b.item_em_size),
            item_gru: GruCell::zeros("item_gru", item_in, b.it_rnn_size),
            dwell,
            out_w: Param::zeros("out_W", b.it_rnn_size, b.num_items),
            out_b: Param::zeros("out_b", 1, b.num_items),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_finite())
    }
}

pub const EMBEDDING_INIT_RANGE: f64 = 0.05;

fn glorot(rng: &mut ChaCha8Rng, p: &mut Param) {
    let (fan_in, fan_out) = p.shape();
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    p.value.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
}

fn uniform(rng: &mut ChaCha8Rng, p: &mut Param, a: f64) {
    p.value.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
}

fn init_cell(rng: &mut ChaCha8Rng, cell: &mut GruCell) {
    for p in [
        &mut cell.w_z,
        &mut cell.w_r,
        &mut cell.w_h,
        &mut cell.u_z,
        &mut cell.u_r,
        &mut cell.u_h,
    ] {
        glorot(rng, p);
    }
}

/// Deterministic initialization from a ChaCha8 stream seeded with `seed`.
///
/// Weight matrices are Glorot-uniform, embeddings uniform in ±0.05 and
/// biases zero. Parameters are drawn in [`ParamSet::params`] order.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(config);
    uniform(&mut rng, &mut p.item_embedding, EMBEDDING_INIT_RANGE);
    init_cell(&mut rng, &mut p.item_gru);
    if let Some(d) = &mut p.dwell {
        uniform(&mut rng, &mut d.embedding, EMBEDDING_INIT_RANGE);
        init_cell(&mut rng, &mut d.gru);
    }
    glorot(&mut rng, &mut p.out_w);
    Ok(p)
}

/// Left-padded mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub max_len: usize,
    /// `B × max_len`, row-major; real item `i` is stored as `i + 1`.
    pub item_ids: Vec<usize>,
    /// `B × max_len`, row-major; bucket `d` is stored as `d + 1`.
    pub dwell_ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub session_ids: Vec<u64>,
}

impl Batch {
    pub fn from_examples<'a, I>(examples: I, max_len: usize) -> Result<Batch>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let mut b = Batch {
            max_len,
            item_ids: Vec::new(),
            dwell_ids: Vec::new(),
            lengths: Vec::new(),
            targets: Vec::new(),
            session_ids: Vec::new(),
        };
        for e in examples {
            let len = e.len();
            if len == 0 || len > max_len || e.input_dwell.len() != len {
                return Err(Error::shape(
                    "Batch::from_examples",
                    format!("1..={max_len} aligned inputs"),
                    format!("{} items / {} dwells", len, e.input_dwell.len()),
                ));
            }
            let pad = max_len - len;
            b.item_ids.extend(std::iter::repeat_n(PAD, pad));
            b.item_ids.extend(e.input_items.iter().map(|i| i + 1));
            b.dwell_ids.extend(std::iter::repeat_n(PAD, pad));
            b.dwell_ids.extend(e.input_dwell.iter().map(|d| d + 1));
            b.lengths.push(len);
            b.targets.push(e.target_item);
            b.session_ids.push(e.session_id);
        }
        Ok(b)
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn item_row(&self, r: usize) -> &[usize] {
        &self.item_ids[r * self.max_len..(r + 1) * self.max_len]
    }

    pub fn dwell_row(&self, r: usize) -> &[usize] {
        &self.dwell_ids[r * self.max_len..(r + 1) * self.max_len]
    }
}

/// Rows of one batch sharing a sequence length.
#[derive(Clone, Debug)]
struct LengthGroup {
    rows: Vec<usize>,
    /// Shifted item ids, one vector per step.
    item_ids: Vec<Vec<usize>>,
    dwell_ids: Vec<Vec<usize>>,
    item_trace: GruTrace,
    dwell_trace: Option<GruTrace>,
}

/// Activations kept by the forward pass for [`model_backward`].
#[derive(Clone, Debug)]
pub struct ModelTrace {
    groups: Vec<LengthGroup>,
    final_h: Tensor2,
}

impl ModelTrace {
    /// Last hidden state of the item GRU for every batch row.
    pub fn final_hidden(&self) -> &Tensor2 {
        &self.final_h
    }
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    let b = params.config.base();
    if batch.max_len != b.max_len {
        return Err(Error::shape("batch max_len", b.max_len, batch.max_len));
    }
    if batch.size() == 0 {
        return Err(Error::Empty("batch"));
    }
    let n = batch.size();
    if batch.item_ids.len() != n * b.max_len || batch.dwell_ids.len() != n * b.max_len || batch.targets.len() != n {
        return Err(Error::shape("batch layout", n * b.max_len, batch.item_ids.len()));
    }
    for &l in &batch.lengths {
        if l == 0 || l > b.max_len {
            return Err(Error::shape("batch row length", format!("1..={}", b.max_len), l));
        }
    }
    Ok(())
}

/// Forward pass for either architecture.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<(Tensor2, ModelTrace)> {
    check_batch(params, batch)?;
    let base = *params.config.base();
    let max_len = base.max_len;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &l) in batch.lengths.iter().enumerate() {
        by_len.entry(l).or_default().push(r);
    }

    let mut final_h = Tensor2::zeros(batch.size(), base.it_rnn_size);
    let mut groups = Vec::with_capacity(by_len.len());
    for (len, rows) in by_len {
        let start = max_len - len;
        let item_ids: Vec<Vec<usize>> = (start..max_len)
            .map(|pos| rows.iter().map(|&r| batch.item_row(r)[pos]).collect())
            .collect();
        let dwell_ids: Vec<Vec<usize>> = (start..max_len)
            .map(|pos| rows.iter().map(|&r| batch.dwell_row(r)[pos]).collect())
            .collect();

        let mut inputs = item_ids
            .iter()
            .map(|ids| embedding_forward(&params.item_embedding, ids))
            .collect::<Result<Vec<_>>>()?;

        let dwell_trace = match &params.dwell {
            Some(d) => {
                let dwell_in = dwell_ids
                    .iter()
                    .map(|ids| embedding_forward(&d.embedding, ids))
                    .collect::<Result<Vec<_>>>()?;
                let h0 = Tensor2::zeros(rows.len(), d.gru.hidden_size);
                let (g, trace) = gru_forward(&d.gru, &dwell_in, &h0)?;
                inputs = g
                    .iter()
                    .zip(&inputs)
                    .map(|(g_t, e_t)| g_t.hconcat(e_t))
                    .collect::<Result<Vec<_>>>()?;
                Some(trace)
            }
            None => None,
        };

        let h0 = Tensor2::zeros(rows.len(), base.it_rnn_size);
        let (hs, item_trace) = gru_forward(&params.item_gru, &inputs, &h0)?;
        let last = hs.last().expect("len >= 1");
        for (gi, &r) in rows.iter().enumerate() {
            final_h.row_mut(r).copy_from_slice(last.row(gi));
        }
        groups.push(LengthGroup {
            rows,
            item_ids,
            dwell_ids,
            item_trace,
            dwell_trace,
        });
    }
    let probs = affine_softmax(&params.out_w, &params.out_b, &final_h)?;
    Ok((probs, ModelTrace { groups, final_h }))
}

pub fn itrnn_forward(params: &ModelParams, batch: &Batch) -> Result<(Tensor2, ModelTrace)> {
    if params.config.kind() != ModelKind::ItRnn {
        return Err(Error::Config("itrnn_forward called on a DT-RNN".into()));
    }
    forward(params, batch)
}

pub fn dtrnn_forward(params: &ModelParams, batch: &Batch) -> Result<(Tensor2, ModelTrace)> {
    if params.config.kind() != ModelKind::DtRnn {
        return Err(Error::Config("dtrnn_forward called on an IT-RNN".into()));
    }
    forward(params, batch)
}

/// Backpropagates the mean next-item cross-entropy into every parameter
/// gradient and returns the loss.
pub fn model_backward(params: &mut ModelParams, trace: &ModelTrace, targets: &[usize]) -> Result<f64> {
    let xent = affine_softmax_xent(&mut params.out_w, &mut params.out_b, &trace.final_h, targets)?;
    let hidden = params.item_gru.hidden_size;
    for g in &trace.groups {
        let steps = g.item_trace.len();
        let mut d_hidden = vec![Tensor2::zeros(g.rows.len(), hidden); steps];
        for (gi, &r) in g.rows.iter().enumerate() {
            d_hidden[steps - 1].row_mut(gi).copy_from_slice(xent.d_h.row(r));
        }
        let d_inputs = gru_backward(&mut params.item_gru, &g.item_trace, &d_hidden)?;
        match (&mut params.dwell, &g.dwell_trace) {
            (Some(d), Some(dwell_trace)) => {
                let split = d.gru.hidden_size;
                let mut d_g = Vec::with_capacity(steps);
                for (t, dx) in d_inputs.iter().enumerate() {
                    let (dg, de) = dx.hsplit(split);
                    embedding_backward(&mut params.item_embedding, &g.item_ids[t], &de)?;
                    d_g.push(dg);
                }
                let d_dwell = gru_backward(&mut d.gru, dwell_trace, &d_g)?;
                for (t, dd) in d_dwell.iter().enumerate() {
                    embedding_backward(&mut d.embedding, &g.dwell_ids[t], dd)?;
                }
            }
            _ => {
                for (t, dx) in d_inputs.iter().enumerate() {
                    embedding_backward(&mut params.item_embedding, &g.item_ids[t], dx)?;
                }
            }
        }
    }
    Ok(xent.loss)
}

/// Mean loss of `batch` without touching gradients.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let (probs, _) = forward(params, batch)?;
    let n = batch.size() as f64;
    Ok(batch
        .targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -probs.get(r, t).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n)
}

/// Indices of the `k` largest entries of `row`, by descending value with
/// ties broken by ascending index. `k` is clamped to the row length.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Top-`k` `(item index, probability)` pairs per batch row.
pub fn predict_topk(params: &ModelParams, batch: &Batch, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let (probs, _) = forward(params, batch)?;
    Ok((0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            top_k(row, k).into_iter().map(|i| (i, row[i])).collect()
        })
        .collect())
}

const CKPT_MAGIC: &[u8; 8] = b"DWRCKPT1";

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    rows: usize,
    cols: usize,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    vocab_digest: String,
    /// Each entry is followed in the payload by value, m and v, each as
    /// `rows * cols` little-endian f64.
    params: Vec<CkptEntry>,
}

/// Serialized checkpoint: magic, u64 LE header length, JSON header, then raw
/// little-endian f64 payload.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, vocab_digest: &str) -> Result<()> {
    let header = CkptHeader {
        config: params.config,
        vocab_digest: vocab_digest.to_string(),
        params: params
            .params()
            .iter()
            .map(|p| CkptEntry {
                name: p.name.clone(),
                rows: p.shape().0,
                cols: p.shape().1,
                step: p.step,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in params.params() {
        for t in [&p.value, &p.m, &p.v] {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parameters and vocabulary digest recovered from a checkpoint.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelParams, String)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CkptHeader = serde_json::from_slice(&json)?;
    header.config.validate()?;
    let mut params = ModelParams::zeros(header.config);
    if params.params().len() != header.params.len() {
        return Err(Error::Checkpoint("parameter count does not match config".into()));
    }
    let mut buf = [0u8; 8];
    for (p, entry) in params.params_mut().into_iter().zip(&header.params) {
        if p.name != entry.name || p.shape() != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, found {} ({}x{})",
                p.name,
                p.shape(),
                entry.name,
                entry.rows,
                entry.cols
            )));
        }
        p.step = entry.step;
        for t in [&mut p.value, &mut p.m, &mut p.v] {
            for x in t.data_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
    }
    Ok((params, header.vocab_digest))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, vocab_digest: &str) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    write_checkpoint(std::io::BufWriter::new(f), params, vocab_digest)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, String)> {
    let f = std::fs::File::open(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    read_checkpoint(std::io::BufReader::new(f))
}
