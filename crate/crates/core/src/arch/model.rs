use super::ledger::AttentionLedger;
use super::{Family, HeadKind, ModelConfig, TabbiePooling, INIT_STD, LN_EPS};
use crate::tensor::{rng::stream, Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::vocab::CLS;
use crate::{Error, Result};

/// Per-forward mutable state: dropout randomness and the pair ledger.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub training: bool,
    pub rng: Rng,
    pub ledger: AttentionLedger,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx { training: false, rng: Rng::new(0, stream::DROPOUT), ledger: AttentionLedger::default() }
    }

    pub fn train(rng: Rng) -> Self {
        Ctx { training: true, rng, ledger: AttentionLedger::default() }
    }
}

/// What [`Model::forward`] returns.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Final states at flat cell indices `b*R*C + r*C + c`; no CLS token.
    Cells(&'a [usize]),
    /// One `d`-vector per grid: the CLS state, or Tabbie's pooling.
    Pooled,
    /// Two-stage families: the aggregated stage-1 vectors, one per row
    /// (`tabbert_row`) or column (`tabbert_col`), before any positions.
    Stage1,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Rng,
}

impl<T: Real> Init<'_, T> {
    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.truncated_normal(INIT_STD)));
        self.store.add(name, t).map(|_| ())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.add(name, Tensor::zeros(shape)).map(|_| ())
    }

    fn ones(&mut self, name: &str, n: usize) -> Result<()> {
        self.store.add(name, Tensor::from_fn(&[n], |_| T::one())).map(|_| ())
    }

    fn linear(&mut self, pre: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(&format!("{pre}.w"), &[fan_in, fan_out])?;
        self.zeros(&format!("{pre}.b"), &[fan_out])
    }

    fn ln(&mut self, pre: &str, d: usize) -> Result<()> {
        self.ones(&format!("{pre}.g"), d)?;
        self.zeros(&format!("{pre}.b"), &[d])
    }

    fn layer(&mut self, pre: &str, d: usize, ffn: usize) -> Result<()> {
        self.ln(&format!("{pre}.ln1"), d)?;
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{pre}.attn.{p}"), d, d)?;
        }
        self.ln(&format!("{pre}.ln2"), d)?;
        self.linear(&format!("{pre}.ffn.1"), d, ffn)?;
        self.linear(&format!("{pre}.ffn.2"), ffn, d)
    }

    fn stack(&mut self, pre: &str, layers: usize, d: usize, ffn: usize) -> Result<()> {
        for l in 0..layers {
            self.layer(&format!("{pre}.{l}"), d, ffn)?;
        }
        self.ln(&format!("{pre}.ln_f"), d)
    }
}

impl<T: Real> Model<T> {
    /// Registers and initializes every parameter from the `INIT` stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, f, v) = (config.d_model, config.ffn(), config.vocab_size);
        let (r, c) = (config.rows, config.cols);
        let mut init = Init { store: &mut store, rng: Rng::new(seed, stream::INIT) };
        init.normal("emb.token", &[v, d])?;
        if config.family == Family::Fieldy && config.split_field_embeddings {
            init.normal("emb.token_col", &[v, d])?;
        }
        if config.use_row_pos_emb {
            init.zeros("emb.row", &[r + 1, d])?;
        }
        if config.use_col_index_emb {
            init.zeros("emb.col", &[c + 1, d])?;
        }
        let l1 = config.layers1;
        match config.family {
            Family::FtFlat => init.stack("s1", l1, d, f)?,
            Family::Tabbie => {
                for l in 0..l1 {
                    init.layer(&format!("s1.row.{l}"), d, f)?;
                    init.layer(&format!("s1.col.{l}"), d, f)?;
                }
                init.ln("s1.ln_f", d)?;
            }
            Family::TabbertRow | Family::TabbertCol => {
                init.stack("s1", l1, d, f)?;
                init.stack("s2", config.layers2, d, f)?;
            }
            Family::Fieldy => {
                init.stack("s1.row", l1, d, f)?;
                init.stack("s1.col", l1, d, f)?;
                init.linear("fuse", 2 * d, d)?;
                init.stack("s2", config.layers2, d, f)?;
            }
        }
        match config.head {
            HeadKind::MaskedLm => {
                match config.family {
                    Family::TabbertRow => init.linear("head.expand", d, c * d)?,
                    Family::TabbertCol => init.linear("head.expand", d, r * d)?,
                    _ => {}
                }
                init.linear("head.mlm", d, v)?;
            }
            HeadKind::Regression { k } => init.linear("head.out", d, k)?,
            HeadKind::Binary => init.linear("head.out", d, 1)?,
        }
        Ok(Model { config, params: store })
    }

    /// Wraps an existing parameter set; names and shapes must match a
    /// freshly built model of the same config.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (name, t) in params {
            let id = model.params.id(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        Ok(model)
    }

    /// Copies every tensor whose name and shape match; returns the names
    /// that were loaded. Used to start fine-tuning from a pretrained body.
    pub fn load_matching(&mut self, tensors: &[(String, Tensor<T>)]) -> Vec<String> {
        let mut loaded = Vec::new();
        for (name, t) in tensors {
            if let Some(id) = self.params.id(name) {
                let p = self.params.get_mut(id);
                if p.value.shape() == t.shape() {
                    p.value = t.clone();
                    loaded.push(name.clone());
                }
            }
        }
        loaded
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Records one forward pass of `batch` grids (`ids` row-major, one grid
    /// after another) and returns the requested states.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[usize], batch: usize, target: Target<'_>, ctx: &mut Ctx) -> Result<Var> {
        let cfg = &self.config;
        let cells = cfg.rows * cfg.cols;
        if ids.len() != batch * cells || batch == 0 {
            return Err(Error::Shape { op: "forward", left: vec![batch, cfg.rows, cfg.cols], right: vec![ids.len()] });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Index { op: "token id", index: bad, bound: cfg.vocab_size });
        }
        if let Target::Cells(sel) = target {
            if let Some(&bad) = sel.iter().find(|&&i| i >= ids.len()) {
                return Err(Error::Index { op: "selected cell", index: bad, bound: ids.len() });
            }
        }
        ctx.ledger = AttentionLedger::default();
        let mut p = Pass { m: self, g, ctx, batch };
        match cfg.family {
            Family::FtFlat => p.ft_flat(ids, target),
            Family::Tabbie => p.tabbie(ids, target),
            Family::TabbertRow => p.tabbert(ids, target, true),
            Family::TabbertCol => p.tabbert(ids, target, false),
            Family::Fieldy => p.fieldy(ids, target),
        }
    }

    /// `[selected.len(), V]` token logits at the selected cells.
    pub fn mlm_logits(&self, g: &mut Graph<T>, ids: &[usize], batch: usize, selected: &[usize], ctx: &mut Ctx) -> Result<Var> {
        if self.config.head != HeadKind::MaskedLm {
            return Err(Error::config("model has no masked-LM head"));
        }
        let h = self.forward(g, ids, batch, Target::Cells(selected), ctx)?;
        let mut p = Pass { m: self, g, ctx, batch };
        p.linear(h, "head.mlm")
    }

    /// `[batch, k]` fine-tuning outputs (raw logits for the binary head).
    pub fn head_output(&self, g: &mut Graph<T>, ids: &[usize], batch: usize, ctx: &mut Ctx) -> Result<Var> {
        if self.config.head == HeadKind::MaskedLm {
            return Err(Error::config("model has a masked-LM head, not a fine-tuning head"));
        }
        let h = self.forward(g, ids, batch, Target::Pooled, ctx)?;
        let mut p = Pass { m: self, g, ctx, batch };
        p.linear(h, "head.out")
    }
}

impl<T: Real> Model<T> {
    /// Token embeddings plus the enabled row-position and column-index
    /// embeddings, `[batch * R * C, d]`.
    pub fn embed_grid(&self, g: &mut Graph<T>, ids: &[usize], batch: usize) -> Result<Var> {
        let (r, c) = (self.config.rows, self.config.cols);
        if ids.len() != batch * r * c {
            return Err(Error::Shape { op: "embed_grid", left: vec![batch, r, c], right: vec![ids.len()] });
        }
        let mut ctx = Ctx::eval();
        let mut p = Pass { m: self, g, ctx: &mut ctx, batch };
        let (rows, cols) = p.grid_positions(r, c);
        let x = p.lookup("emb.token", ids)?;
        let x = p.add_pos(x, "emb.row", &rows)?;
        p.add_pos(x, "emb.col", &cols)
    }
}

struct Pass<'m, 'g, T> {
    m: &'m Model<T>,
    g: &'g mut Graph<T>,
    ctx: &'g mut Ctx,
    batch: usize,
}

/// Index map that reads a row-major `[b][r][c]` buffer in `[b][c][r]` order.
fn to_col_major(b: usize, r: usize, c: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b * r * c);
    for s in 0..b {
        for cc in 0..c {
            for rr in 0..r {
                out.push(s * r * c + rr * c + cc);
            }
        }
    }
    out
}

/// Inverse of [`to_col_major`].
fn to_row_major(b: usize, r: usize, c: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b * r * c);
    for s in 0..b {
        for rr in 0..r {
            for cc in 0..c {
                out.push(s * r * c + cc * r + rr);
            }
        }
    }
    out
}

impl<T: Real> Pass<'_, '_, T> {
    fn cfg(&self) -> &ModelConfig {
        &self.m.config
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let store = &self.m.params;
        let id = store.id(name).ok_or_else(|| Error::config(format!("model has no parameter {name}")))?;
        Ok(self.g.param(store, id))
    }

    fn has(&self, name: &str) -> bool {
        self.m.params.id(name).is_some()
    }

    fn linear(&mut self, x: Var, pre: &str) -> Result<Var> {
        let w = self.p(&format!("{pre}.w"))?;
        let b = self.p(&format!("{pre}.b"))?;
        self.g.linear(x, w, b)
    }

    fn ln(&mut self, x: Var, pre: &str) -> Result<Var> {
        let gain = self.p(&format!("{pre}.g"))?;
        let bias = self.p(&format!("{pre}.b"))?;
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.m.config.dropout;
        self.g.dropout(x, p, &mut self.ctx.rng, self.ctx.training)
    }

    /// Pre-norm block over independent sequences of length `seq`.
    fn layer(&mut self, x: Var, pre: &str, seq: usize, stage: usize) -> Result<Var> {
        let heads = self.cfg().heads;
        let h = self.ln(x, &format!("{pre}.ln1"))?;
        let q = self.linear(h, &format!("{pre}.attn.q"))?;
        let k = self.linear(h, &format!("{pre}.attn.k"))?;
        let v = self.linear(h, &format!("{pre}.attn.v"))?;
        let a = self.g.attention(q, k, v, seq, heads)?;
        let seqs = self.g.shape(x)[0] / seq;
        self.ctx.ledger.record(stage, seqs, seq, heads);
        let a = self.linear(a, &format!("{pre}.attn.o"))?;
        let a = self.dropout(a)?;
        let x = self.g.add(x, a)?;
        let h = self.ln(x, &format!("{pre}.ln2"))?;
        let f = self.linear(h, &format!("{pre}.ffn.1"))?;
        let f = self.g.gelu(f);
        let f = self.linear(f, &format!("{pre}.ffn.2"))?;
        let f = self.dropout(f)?;
        self.g.add(x, f)
    }

    fn stack(&mut self, mut x: Var, pre: &str, layers: usize, seq: usize, stage: usize) -> Result<Var> {
        for l in 0..layers {
            x = self.layer(x, &format!("{pre}.{l}"), seq, stage)?;
        }
        self.ln(x, &format!("{pre}.ln_f"))
    }

    fn lookup(&mut self, table: &str, idx: &[usize]) -> Result<Var> {
        let t = self.p(table)?;
        self.g.gather_rows(t, idx)
    }

    /// Adds rows of a positional table, if the model has it.
    fn add_pos(&mut self, x: Var, table: &str, idx: &[usize]) -> Result<Var> {
        if !self.has(table) {
            return Ok(x);
        }
        let e = self.lookup(table, idx)?;
        self.g.add(x, e)
    }

    /// Row and column positions of a row-major `[batch][r][c]` layout.
    fn grid_positions(&self, r: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.batch * r * c;
        ((0..n).map(|i| (i / c) % r).collect(), (0..n).map(|i| i % c).collect())
    }

    /// `[S, d]` CLS vectors with the given positional rows.
    fn cls_rows(&mut self, row: Option<usize>, col: Option<usize>) -> Result<Var> {
        let s = self.batch;
        let mut x = self.lookup("emb.token", &vec![CLS; s])?;
        if let Some(r) = row {
            x = self.add_pos(x, "emb.row", &vec![r; s])?;
        }
        if let Some(c) = col {
            x = self.add_pos(x, "emb.col", &vec![c; s])?;
        }
        Ok(x)
    }

    /// Puts `cls[s]` in front of each of the `batch` sequences of length `n`.
    fn prepend(&mut self, x: Var, cls: Var, n: usize) -> Result<Var> {
        let s = self.batch;
        let both = self.g.concat_rows(x, cls)?;
        let mut idx = Vec::with_capacity(s * (n + 1));
        for i in 0..s {
            idx.push(s * n + i);
            idx.extend(i * n..(i + 1) * n);
        }
        self.g.gather_rows(both, &idx)
    }

    /// Rows `0, n, 2n, ...` of a `[batch * n, d]` tensor.
    fn firsts(&mut self, x: Var, n: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..self.batch).map(|s| s * n).collect();
        self.g.gather_rows(x, &idx)
    }

    fn ft_flat(&mut self, ids: &[usize], target: Target<'_>) -> Result<Var> {
        let (r, c) = (self.cfg().rows, self.cfg().cols);
        let n = r * c;
        let (rows, cols) = self.grid_positions(r, c);
        let mut x = self.lookup("emb.token", ids)?;
        x = self.add_pos(x, "emb.row", &rows)?;
        x = self.add_pos(x, "emb.col", &cols)?;
        let l1 = self.cfg().layers1;
        match target {
            Target::Cells(sel) => {
                let x = self.dropout(x)?;
                let h = self.stack(x, "s1", l1, n, 1)?;
                self.g.gather_rows(h, sel)
            }
            Target::Pooled => {
                let cls = self.cls_rows(Some(r), Some(c))?;
                let x = self.prepend(x, cls, n)?;
                let x = self.dropout(x)?;
                let h = self.stack(x, "s1", l1, n + 1, 1)?;
                self.firsts(h, n + 1)
            }
            Target::Stage1 => Err(Error::config("ft_flat has no stage-1 aggregate")),
        }
    }

    fn tabbie(&mut self, ids: &[usize], target: Target<'_>) -> Result<Var> {
        let (r, c) = (self.cfg().rows, self.cfg().cols);
        let pooling = self.cfg().tabbie_pooling;
        let with_cls = matches!(target, Target::Pooled) && pooling == TabbiePooling::ClsGrid;
        if matches!(target, Target::Stage1) {
            return Err(Error::config("tabbie has no stage-1 aggregate"));
        }
        // With CLS cells the grid grows to (R+1) x (C+1): a CLS closes every
        // row and every column, plus the unused corner.
        let (rg, cg) = if with_cls { (r + 1, c + 1) } else { (r, c) };
        let mut grid_ids = Vec::with_capacity(self.batch * rg * cg);
        for s in 0..self.batch {
            for rr in 0..rg {
                for cc in 0..cg {
                    grid_ids.push(if rr < r && cc < c { ids[s * r * c + rr * c + cc] } else { CLS });
                }
            }
        }
        let (rows, cols) = self.grid_positions(rg, cg);
        let mut x = self.lookup("emb.token", &grid_ids)?;
        x = self.add_pos(x, "emb.row", &rows)?;
        x = self.add_pos(x, "emb.col", &cols)?;
        x = self.dropout(x)?;
        let to_col = to_col_major(self.batch, rg, cg);
        let to_row = to_row_major(self.batch, rg, cg);
        for l in 0..self.cfg().layers1 {
            let row = self.layer(x, &format!("s1.row.{l}"), cg, 1)?;
            let xc = self.g.gather_rows(x, &to_col)?;
            let col = self.layer(xc, &format!("s1.col.{l}"), rg, 1)?;
            let col = self.g.gather_rows(col, &to_row)?;
            let sum = self.g.add(row, col)?;
            x = self.g.scale(sum, 0.5);
        }
        let h = self.ln(x, "s1.ln_f")?;
        match target {
            Target::Cells(sel) => self.g.gather_rows(h, sel),
            Target::Pooled if with_cls => {
                let mut idx = Vec::with_capacity(self.batch * (r + c));
                for s in 0..self.batch {
                    let base = s * rg * cg;
                    idx.extend((0..r).map(|rr| base + rr * cg + c));
                    idx.extend((0..c).map(|cc| base + r * cg + cc));
                }
                let cls = self.g.gather_rows(h, &idx)?;
                self.g.segment_mean(cls, r + c)
            }
            _ => self.g.segment_mean(h, r * c),
        }
    }

    fn tabbert(&mut self, ids: &[usize], target: Target<'_>, by_row: bool) -> Result<Var> {
        let (r, c) = (self.cfg().rows, self.cfg().cols);
        let b = self.batch;
        let (rows, cols) = self.grid_positions(r, c);
        let mut x = self.lookup("emb.token", ids)?;
        // Stage 1 sees the position along its own axis only.
        let (inner, outer) = if by_row { (c, r) } else { (r, c) };
        if by_row {
            x = self.add_pos(x, "emb.col", &cols)?;
        } else {
            x = self.add_pos(x, "emb.row", &rows)?;
            x = self.g.gather_rows(x, &to_col_major(b, r, c))?;
        }
        x = self.dropout(x)?;
        let l1 = self.cfg().layers1;
        let h1 = self.stack(x, "s1", l1, inner, 1)?;
        let pooled = self.g.segment_mean(h1, inner)?;
        if let Target::Stage1 = target {
            return Ok(pooled);
        }
        let (table, limit) = if by_row { ("emb.row", r) } else { ("emb.col", c) };
        let pos: Vec<usize> = (0..b * outer).map(|i| i % outer).collect();
        let mut z = self.add_pos(pooled, table, &pos)?;
        let l2 = self.cfg().layers2;
        match target {
            Target::Pooled => {
                let cls = if by_row { self.cls_rows(Some(limit), None)? } else { self.cls_rows(None, Some(limit))? };
                z = self.prepend(z, cls, outer)?;
                z = self.dropout(z)?;
                let h2 = self.stack(z, "s2", l2, outer + 1, 2)?;
                self.firsts(h2, outer + 1)
            }
            Target::Cells(sel) => {
                z = self.dropout(z)?;
                let h2 = self.stack(z, "s2", l2, outer, 2)?;
                // Each row (column) vector is expanded back into its fields.
                let e = self.linear(h2, "head.expand")?;
                let d = self.cfg().d_model;
                let e = self.g.reshape(e, &[b * r * c, d])?;
                let e = self.g.gelu(e);
                let idx: Vec<usize> = if by_row {
                    sel.to_vec()
                } else {
                    sel.iter().map(|&i| (i / (r * c)) * r * c + (i % c) * r + (i % (r * c)) / c).collect()
                };
                self.g.gather_rows(e, &idx)
            }
            Target::Stage1 => unreachable!(),
        }
    }

    fn fieldy(&mut self, ids: &[usize], target: Target<'_>) -> Result<Var> {
        let (r, c) = (self.cfg().rows, self.cfg().cols);
        let b = self.batch;
        let n = r * c;
        if matches!(target, Target::Stage1) {
            return Err(Error::config("fieldy has no pooled stage-1 aggregate"));
        }
        let l1 = self.cfg().layers1;
        let xr = self.lookup("emb.token", ids)?;
        let xr = self.dropout(xr)?;
        let col_table = if self.has("emb.token_col") { "emb.token_col" } else { "emb.token" };
        let to_col = to_col_major(b, r, c);
        let col_ids: Vec<usize> = to_col.iter().map(|&i| ids[i]).collect();
        let xc = self.lookup(col_table, &col_ids)?;
        let xc = self.dropout(xc)?;
        let hr = self.stack(xr, "s1.row", l1, c, 1)?;
        let hc = self.stack(xc, "s1.col", l1, r, 1)?;
        let hc = self.g.gather_rows(hc, &to_row_major(b, r, c))?;
        let cat = self.g.concat_cols(hr, hc)?;
        let f = self.linear(cat, "fuse")?;
        let mut z = self.g.gelu(f);
        let (rows, cols) = self.grid_positions(r, c);
        z = self.add_pos(z, "emb.row", &rows)?;
        z = self.add_pos(z, "emb.col", &cols)?;
        let l2 = self.cfg().layers2;
        match target {
            Target::Cells(sel) => {
                let z = self.dropout(z)?;
                let h = self.stack(z, "s2", l2, n, 2)?;
                self.g.gather_rows(h, sel)
            }
            Target::Pooled => {
                let cls = self.cls_rows(Some(r), Some(c))?;
                let z = self.prepend(z, cls, n)?;
                let z = self.dropout(z)?;
                let h = self.stack(z, "s2", l2, n + 1, 2)?;
                self.firsts(h, n + 1)
            }
            Target::Stage1 => unreachable!(),
        }
    }
}

#[cfg(test)]
pub(crate) fn layout_maps(b: usize, r: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
    (to_col_major(b, r, c), to_row_major(b, r, c))
}
