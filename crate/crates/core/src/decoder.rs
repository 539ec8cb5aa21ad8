//! Question decoder: a variational LSTM conditioned on the mixed cue
//! encoding, with a logit head and a softplus variance head, plus the loss
//! family used for training (cross-entropy, Monte-Carlo aleatoric loss,
//! distorted difference) and the uncertainty-driven refinement of the
//! encoding.

use serde::{Deserialize, Serialize};

use crate::cues::{BOS, EOS, PAD};
use crate::nn::{apply_mask, layer_tag, BayesianLstmCell, Bound, EmbeddingTable, Linear, LstmMasks, Noise, ParamStore};
use crate::tensor::{softmax_logsumexp, Result, RngStream, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MumcConfig {
    /// Run the refinement pass.
    pub enabled: bool,
    /// Monte-Carlo draws for the aleatoric loss during training.
    pub samples: usize,
    /// Monte-Carlo passes at evaluation and sampling time.
    pub eval_samples: usize,
    /// Scale of the exponential branch of the distorted loss.
    pub alpha: f64,
    /// Reversal scale of the refinement gradient.
    pub gamma: f64,
    /// Weight of the distorted uncertainty loss in the total.
    pub lambda_u: f64,
}

impl Default for MumcConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: 20,
            eval_samples: 50,
            alpha: 1.0,
            gamma: 1.0,
            lambda_u: 1.0,
        }
    }
}

impl MumcConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.samples == 0 || self.eval_samples == 0 {
            return Err("Monte-Carlo sample counts must be >= 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lambda_u.is_finite() && self.lambda_u >= 0.0) {
            return Err(format!("lambda_u must be >= 0, got {}", self.lambda_u));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cell: BayesianLstmCell,
    /// Maps the encoding to the embedding width when the two differ.
    pub input_proj: Option<Linear>,
    pub out: Linear,
    pub var_head: Linear,
    pub vocab: usize,
    pub enc_dim: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        enc_dim: usize,
        embed_dim: usize,
        hidden: usize,
        vocab: usize,
        rng: &mut RngStream,
    ) -> Self {
        let input_proj = (enc_dim != embed_dim).then(|| Linear::new(store, "dec.in", enc_dim, embed_dim, false, rng));
        let cell = BayesianLstmCell::new(store, "dec.lstm", embed_dim, hidden, rng);
        let out = Linear::new(store, "dec.out", hidden, vocab, true, rng);
        let var_head = Linear::new(store, "dec.var", hidden, vocab, true, rng);
        Self {
            cell,
            input_proj,
            out,
            var_head,
            vocab,
            enc_dim,
        }
    }

    pub fn sample_masks(&self, noise: Noise<'_>, rows: usize) -> Result<LstmMasks> {
        self.cell.sample_masks(noise, rows)
    }

    fn first_input<'t>(&self, p: &Bound<'t>, g_enc: Var<'t>) -> Result<Var<'t>> {
        let (rows, cols) = g_enc.dims2();
        if cols != self.enc_dim {
            return Err(TensorError::Shape {
                op: "decoder input",
                left: vec![rows, cols],
                right: vec![self.enc_dim],
            });
        }
        match &self.input_proj {
            Some(l) => l.forward(p, g_enc),
            None => Ok(g_enc),
        }
    }

    /// Logits and predicted variances from a (masked) hidden state.
    pub fn heads<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let logits = self.out.forward(p, h)?;
        let var = self.var_head.forward(p, h)?.softplus()?;
        Ok((logits, var))
    }
}

/// Per-step decoder outputs for a batch.
pub struct DecodeOutput<'t> {
    /// `rows × V` per predicted position.
    pub logits: Vec<Var<'t>>,
    /// `rows × V`, all entries positive.
    pub variances: Vec<Var<'t>>,
    /// Gold next token per step and row; `None` past a row's end.
    pub targets: Vec<Vec<Option<usize>>>,
    /// Predicted tokens per row.
    pub counts: Vec<usize>,
}

impl DecodeOutput<'_> {
    pub fn total_tokens(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Step −1 consumes the encoding; step `t` consumes gold token `t` and
/// predicts token `t + 1`. Every gold sequence is `BOS … EOS`.
pub fn decode_teacher_forced<'t>(
    dec: &Decoder,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    g_enc: Var<'t>,
    golds: &[&[usize]],
    masks: &LstmMasks,
) -> Result<DecodeOutput<'t>> {
    let rows = g_enc.dims2().0;
    if golds.len() != rows {
        return Err(TensorError::Shape {
            op: "decode_teacher_forced",
            left: vec![rows],
            right: vec![golds.len()],
        });
    }
    for g in golds {
        if g.len() < 2 || g[0] != BOS || g[g.len() - 1] != EOS {
            return Err(TensorError::Domain {
                op: "decode_teacher_forced",
                msg: format!("gold sequence must be BOS … EOS with at least one prediction, got {g:?}"),
            });
        }
        if let Some(&bad) = g.iter().find(|&&t| t >= dec.vocab) {
            return Err(TensorError::Domain {
                op: "decode_teacher_forced",
                msg: format!("token {bad} out of range for vocabulary of {}", dec.vocab),
            });
        }
    }
    let steps = golds.iter().map(|g| g.len() - 1).max().unwrap_or(0);
    let mut inputs = vec![dec.first_input(p, g_enc)?];
    let mut active = vec![vec![true; rows]];
    let mut targets = Vec::with_capacity(steps);
    for t in 0..steps {
        let ids: Vec<usize> = golds.iter().map(|g| if t < g.len() - 1 { g[t] } else { PAD }).collect();
        inputs.push(emb.lookup(p, &ids)?);
        active.push(golds.iter().map(|g| t < g.len() - 1).collect());
        targets.push(golds.iter().map(|g| (t < g.len() - 1).then(|| g[t + 1])).collect());
    }
    let run = dec.cell.run(p, &inputs, dec.cell.zero_state(p, rows), masks, Some(&active))?;
    let mut logits = Vec::with_capacity(steps);
    let mut variances = Vec::with_capacity(steps);
    for h in &run.outputs[1..] {
        let (y, v) = dec.heads(p, *h)?;
        logits.push(y);
        variances.push(v);
    }
    Ok(DecodeOutput {
        logits,
        variances,
        targets,
        counts: golds.iter().map(|g| g.len() - 1).collect(),
    })
}

/// Sums per-step `rows × 1` losses and divides each row by its token count.
fn per_row_mean<'t>(out: &DecodeOutput<'t>, per_step: Vec<Var<'t>>) -> Result<Var<'t>> {
    let mut total = per_step[0];
    for l in &per_step[1..] {
        total = total.add(l)?;
    }
    let inv: Vec<f64> = out.counts.iter().map(|&n| 1.0 / n as f64).collect();
    let inv = total.tape().constant(Tensor::new(vec![inv.len(), 1], inv)?);
    total.scale_rows(&inv)
}

/// Per-example token-mean cross-entropy, `rows × 1`.
pub fn gen_loss_per_example<'t>(out: &DecodeOutput<'t>) -> Result<Var<'t>> {
    let ce = out
        .logits
        .iter()
        .zip(&out.targets)
        .map(|(y, t)| y.cross_entropy_rows(t))
        .collect::<Result<Vec<_>>>()?;
    per_row_mean(out, ce)
}

/// Token-mean cross-entropy over the batch; padding is excluded from sum and count.
pub fn gen_loss<'t>(out: &DecodeOutput<'t>) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (y, t) in out.logits.iter().zip(&out.targets) {
        let s = y.cross_entropy_rows(t)?.sum()?;
        total = Some(match total {
            Some(a) => a.add(&s)?,
            None => s,
        });
    }
    let total = total.ok_or(TensorError::Empty("gen_loss"))?;
    total.scale(1.0 / out.total_tokens() as f64)
}

/// `ŷ = y + ε ⊙ σ` as ordinary tape operations.
pub fn lrt_sample<'t>(logits: Var<'t>, sigma: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
    if sigma.value().data().iter().any(|&s| s < 0.0) {
        return Err(TensorError::Domain {
            op: "lrt_sample",
            msg: "standard deviation must be non-negative".into(),
        });
    }
    logits.add(&sigma.mul(&logits.tape().constant(eps.clone()))?)
}

/// Standard-normal draws for the aleatoric loss, laid out `[T][rows][V]`.
/// Row `r` at step `step` always uses the same substream of `streams[r]`.
pub fn lrt_noise(streams: &[RngStream], step: usize, samples: usize, width: usize) -> Vec<f64> {
    let rows = streams.len();
    let mut eps = vec![0.0; samples * rows * width];
    let tag = layer_tag("dec.lrt");
    for (r, s) in streams.iter().enumerate() {
        let mut rng = s.split(tag).split(step as u64);
        for t in 0..samples {
            for j in 0..width {
                eps[(t * rows + r) * width + j] = rng.normal();
            }
        }
    }
    eps
}

/// Per-example Monte-Carlo aleatoric loss, `rows × 1`:
/// token mean of `-log((1/T) Σ_t softmax(y + ε_t ⊙ √v)[gold])`.
pub fn aleatoric_mc_loss_per_example<'t>(out: &DecodeOutput<'t>, samples: usize, streams: &[RngStream]) -> Result<Var<'t>> {
    if samples == 0 {
        return Err(TensorError::Empty("aleatoric_mc_loss: T must be >= 1"));
    }
    let mut per_step = Vec::with_capacity(out.logits.len());
    for (step, ((y, v), t)) in out.logits.iter().zip(&out.variances).zip(&out.targets).enumerate() {
        let (rows, width) = y.dims2();
        if streams.len() != rows {
            return Err(TensorError::Shape {
                op: "aleatoric_mc_loss",
                left: vec![rows, width],
                right: vec![streams.len()],
            });
        }
        let eps = lrt_noise(streams, step, samples, width);
        per_step.push(y.mc_cross_entropy_rows(&v.sqrt()?, &eps, samples, t)?);
    }
    per_row_mean(out, per_step)
}

/// Piecewise `α(e^Δ − 1)` for `Δ < 0`, `Δ` otherwise, with `Δ = L_p − L_y`.
pub fn distorted_loss<'t>(plain: Var<'t>, aleatoric: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(TensorError::Domain {
            op: "distorted_loss",
            msg: format!("alpha must be > 0, got {alpha}"),
        });
    }
    plain.sub(&aleatoric)?.distort(alpha)
}

/// `g' = g + ∇' ⊙ g` with `∇' = (−γ ∂L_u/∂g) ⊙ Σ_B μ_B`. The gradient is a
/// constant here: no second-order terms flow through the refinement.
pub fn mumc_refine<'t>(g_enc: Var<'t>, fused: &[Var<'t>], grad: &Tensor, gamma: f64) -> Result<Var<'t>> {
    if grad.shape() != g_enc.shape().as_slice() {
        return Err(TensorError::Shape {
            op: "mumc_refine",
            left: g_enc.shape(),
            right: grad.shape().to_vec(),
        });
    }
    if fused.is_empty() {
        return Err(TensorError::Empty("mumc_refine: no cue embeddings"));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(TensorError::Domain {
            op: "mumc_refine",
            msg: format!("gamma must be >= 0, got {gamma}"),
        });
    }
    let reversed: Vec<f64> = grad.data().iter().map(|g| -gamma * g).collect();
    let reversed = g_enc.tape().constant(Tensor::new(grad.shape().to_vec(), reversed)?);
    let mut cue_sum = fused[0];
    for mu in &fused[1..] {
        cue_sum = cue_sum.add(mu)?;
    }
    let step = reversed.mul(&cue_sum)?;
    g_enc.add(&step.mul(&g_enc)?)
}

/// `L_gen + λ_u · L_u`.
pub fn total_loss<'t>(gen: Var<'t>, uncertainty: Var<'t>, lambda_u: f64) -> Result<Var<'t>> {
    if lambda_u == 0.0 {
        return Ok(gen);
    }
    gen.add(&uncertainty.scale(lambda_u)?)
}

/// One generated question with its per-step outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSample {
    /// Ends with EOS unless `max_len` was reached.
    pub tokens: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Mean predicted variance at the chosen tokens.
    pub uncertainty: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for every row of `g_enc`.
pub fn generate_greedy<'t>(
    dec: &Decoder,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    g_enc: Var<'t>,
    max_len: usize,
    masks: &LstmMasks,
) -> Result<Vec<QuestionSample>> {
    decode_greedy_with(dec, emb, p, g_enc, max_len, masks, |logits, r| argmax(logits.row_slice(r)))
}

/// Greedy decoding where every row is an MC draw of the same example and
/// the next token maximises the softmax averaged over rows. Returns one
/// sample; its logits and variances are row means.
pub fn generate_mc_mean<'t>(
    dec: &Decoder,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    g_enc: Var<'t>,
    max_len: usize,
    masks: &LstmMasks,
) -> Result<QuestionSample> {
    let rows = g_enc.dims2().0;
    let chosen = std::cell::RefCell::new(None);
    let samples = decode_greedy_with(dec, emb, p, g_enc, max_len, masks, |logits, r| {
        if r == 0 {
            let mut mean = vec![0.0; logits.dims2().1];
            for i in 0..rows {
                let (probs, _) = softmax_logsumexp(logits.row_slice(i)).expect("finite logits");
                mean.iter_mut().zip(probs).for_each(|(m, q)| *m += q / rows as f64);
            }
            *chosen.borrow_mut() = Some(argmax(&mean));
        }
        chosen.borrow().expect("row 0 chooses first")
    })?;
    let first = &samples[0];
    let steps = first.tokens.len();
    let average = |pick: fn(&QuestionSample) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..steps)
            .map(|t| {
                let width = pick(first)[t].len();
                (0..width)
                    .map(|j| samples.iter().map(|s| pick(s)[t][j]).sum::<f64>() / rows as f64)
                    .collect()
            })
            .collect()
    };
    let logits = average(|s| &s.logits);
    let variances = average(|s| &s.variances);
    let uncertainty = mean_at(&variances, &first.tokens);
    Ok(QuestionSample {
        tokens: first.tokens.clone(),
        logits,
        variances,
        uncertainty,
    })
}

fn mean_at(values: &[Vec<f64>], tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    values.iter().zip(tokens).map(|(v, &t)| v[t]).sum::<f64>() / tokens.len() as f64
}

fn decode_greedy_with<'t>(
    dec: &Decoder,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    g_enc: Var<'t>,
    max_len: usize,
    masks: &LstmMasks,
    mut choose: impl FnMut(&Tensor, usize) -> usize,
) -> Result<Vec<QuestionSample>> {
    if max_len == 0 {
        return Err(TensorError::Domain {
            op: "generate",
            msg: "max_len must be >= 1".into(),
        });
    }
    let rows = g_enc.dims2().0;
    let (h0, c0) = dec.cell.zero_state(p, rows);
    let (mut h, mut c) = dec.cell.step(p, dec.first_input(p, g_enc)?, h0, c0, masks)?;
    let mut next = vec![BOS; rows];
    let mut done = vec![false; rows];
    let mut samples: Vec<QuestionSample> = (0..rows)
        .map(|_| QuestionSample {
            tokens: Vec::new(),
            logits: Vec::new(),
            variances: Vec::new(),
            uncertainty: 0.0,
        })
        .collect();
    for _ in 0..max_len {
        let x = emb.lookup(p, &next)?;
        (h, c) = dec.cell.step(p, x, h, c, masks)?;
        let (y, v) = dec.heads(p, apply_mask(h, masks.output.as_ref())?)?;
        let (y, v) = (y.value(), v.value());
        for r in 0..rows {
            if done[r] {
                continue;
            }
            let tok = choose(&y, r);
            let s = &mut samples[r];
            s.tokens.push(tok);
            s.logits.push(y.row_slice(r).to_vec());
            s.variances.push(v.row_slice(r).to_vec());
            next[r] = tok;
            done[r] = tok == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    for s in &mut samples {
        s.uncertainty = mean_at(&s.variances, &s.tokens);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DropoutSpec;
    use crate::tensor::{grad_check, sigmoid, softplus, Tape};

    struct Toy {
        store: ParamStore,
        dec: Decoder,
        emb: EmbeddingTable,
    }

    fn toy(enc: usize, embed: usize, hidden: usize, vocab: usize) -> Toy {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3, 9);
        let emb = EmbeddingTable::new(&mut store, "emb", embed, vocab, &mut rng);
        let dec = Decoder::new(&mut store, enc, embed, hidden, vocab, &mut rng);
        Toy { store, dec, emb }
    }

    fn zero_all(store: &mut ParamStore) {
        for (_, t) in store.iter_mut() {
            t.update(|d| d.fill(0.0)).unwrap();
        }
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let mut t = toy(3, 3, 4, 6);
        zero_all(&mut t.store);
        let tape = Tape::new();
        let p = t.store.bind(&tape);
        let g = tape.constant(Tensor::row(&[0.5, -1.0, 2.0]).unwrap());
        let out = decode_teacher_forced(&t.dec, &t.emb, &p, g, &[&[BOS, 4, 5, EOS]], &LstmMasks::default()).unwrap();
        assert_eq!(out.logits.len(), 3);
        for y in &out.logits {
            assert_eq!(y.to_vec(), vec![0.0; 6]);
        }
        let l = gen_loss(&out).unwrap().item().unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_prediction_matches_hand_computation() {
        // encoder width 1 = embedding width, 2 hidden units, vocabulary of 4
        let mut t = toy(1, 1, 2, 4);
        zero_all(&mut t.store);
        for gate in ["input", "forget", "output", "cell"] {
            t.store.insert(
                format!("dec.lstm.{gate}.w"),
                Tensor::from_rows(&[vec![0.5, -0.25], vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap(),
            );
        }
        t.store.insert("emb.table", Tensor::row(&[0.0, 0.7, 0.0, 0.0]).unwrap());
        t.store.insert("dec.out.w", Tensor::from_rows(&[vec![1.0, 0.0, -1.0, 0.5], vec![0.0, 2.0, 1.0, -0.5]]).unwrap());
        t.store.insert("dec.var.w", Tensor::from_rows(&[vec![0.3, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.4]]).unwrap());
        let w = [[0.5, -0.25], [0.1, 0.2], [-0.3, 0.4]];
        let step = |x: f64, h: [f64; 2], c: [f64; 2]| {
            let mut hn = [0.0; 2];
            let mut cn = [0.0; 2];
            for j in 0..2 {
                let pre = x * w[0][j] + h[0] * w[1][j] + h[1] * w[2][j];
                let (i, f, o, g) = (sigmoid(pre), sigmoid(pre), sigmoid(pre), pre.tanh());
                cn[j] = f * c[j] + i * g;
                hn[j] = o * cn[j].tanh();
            }
            (hn, cn)
        };
        let (h, c) = step(0.9, [0.0; 2], [0.0; 2]);
        let (h, _) = step(0.7, h, c);
        let logits = [h[0], 2.0 * h[1], -h[0] + h[1], 0.5 * h[0] - 0.5 * h[1]];
        let vars = [softplus(0.3 * h[0]), softplus(0.0), softplus(0.0), softplus(0.4 * h[1])];
        let tape = Tape::new();
        let p = t.store.bind(&tape);
        let g = tape.constant(Tensor::row(&[0.9]).unwrap());
        let out = decode_teacher_forced(&t.dec, &t.emb, &p, g, &[&[BOS, EOS]], &LstmMasks::default()).unwrap();
        for (a, b) in out.logits[0].to_vec().iter().zip(logits) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in out.variances[0].to_vec().iter().zip(vars) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(out.targets, vec![vec![Some(EOS)]]);
    }

    #[test]
    fn variances_positive_and_padding_masked() {
        let t = toy(3, 4, 5, 7);
        let tape = Tape::new();
        let p = t.store.bind(&tape);
        let g = tape.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.3, 0.0, 0.9]]).unwrap());
        let golds: [&[usize]; 2] = [&[BOS, 4, 5, 6, EOS], &[BOS, 6, EOS]];
        let out = decode_teacher_forced(&t.dec, &t.emb, &p, g, &golds, &LstmMasks::default()).unwrap();
        assert!(out.variances.iter().all(|v| v.to_vec().iter().all(|&x| x > 0.0)));
        assert_eq!(out.counts, vec![4, 2]);
        assert_eq!(out.targets[3], vec![Some(EOS), None]);
        // brute force: -log p per real token, averaged over all real tokens
        let mut total = 0.0;
        for (y, tg) in out.logits.iter().zip(&out.targets) {
            let y = y.value();
            for (r, target) in tg.iter().enumerate() {
                if let Some(gold) = target {
                    let row = y.row_slice(r);
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    total -= (row[*gold].exp() / z).ln();
                }
            }
        }
        let l = gen_loss(&out).unwrap().item().unwrap();
        assert!((l - total / 6.0).abs() < 1e-12);
        let per = gen_loss_per_example(&out).unwrap();
        assert_eq!(per.shape(), vec![2, 1]);
    }

    #[test]
    fn bad_gold_sequences_rejected() {
        let t = toy(3, 3, 2, 6);
        let tape = Tape::new();
        let p = t.store.bind(&tape);
        let g = tape.constant(Tensor::row(&[0.1, 0.2, 0.3]).unwrap());
        let m = LstmMasks::default();
        for gold in [&[BOS][..], &[4, EOS], &[BOS, 4], &[BOS, 9, EOS]] {
            assert!(decode_teacher_forced(&t.dec, &t.emb, &p, g, &[gold], &m).is_err());
        }
    }

    #[test]
    fn uniform_and_saturated_gen_loss() {
        let tape = Tape::new();
        let y = tape.leaf(&Tensor::zeros(&[1, 4]));
        let out = DecodeOutput {
            logits: vec![y, y],
            variances: vec![y, y],
            targets: vec![vec![Some(1)], vec![Some(3)]],
            counts: vec![2],
        };
        assert!((gen_loss(&out).unwrap().item().unwrap() - 4f64.ln()).abs() < 1e-15);
        let sharp = tape.leaf(&Tensor::row(&[0.0, 1e3, 0.0, 0.0]).unwrap());
        let out = DecodeOutput {
            logits: vec![sharp],
            variances: vec![sharp],
            targets: vec![vec![Some(1)]],
            counts: vec![1],
        };
        assert!(gen_loss(&out).unwrap().item().unwrap() < 1e-300);
    }

    #[test]
    fn lrt_zero_sigma_is_identity_and_variance_matches() {
        let tape = Tape::new();
        let y = tape.leaf(&Tensor::row(&[0.3, -1.2]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let mut rng = RngStream::new(6, 0);
        for _ in 0..5 {
            let eps = Tensor::row(&[rng.normal(), rng.normal()]).unwrap();
            assert_eq!(lrt_sample(y, zero, &eps).unwrap().to_vec(), y.to_vec());
        }
        let v = [0.25, 4.0];
        let sigma = tape.constant(Tensor::row(&[0.5, 2.0]).unwrap());
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = Tensor::row(&[rng.normal(), rng.normal()]).unwrap();
            let s = lrt_sample(y, sigma, &eps).unwrap().to_vec();
            for j in 0..2 {
                sum[j] += s[j];
                sq[j] += s[j] * s[j];
            }
        }
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!((var - v[j]).abs() / v[j] < 0.1, "{var} vs {}", v[j]);
        }
        let neg = tape.constant(Tensor::row(&[-0.1, 0.0]).unwrap());
        assert!(lrt_sample(y, neg, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn lrt_gradients() {
        let tape = Tape::new();
        let y = tape.leaf(&Tensor::row(&[0.3, -1.2, 0.5]).unwrap());
        let sigma = tape.leaf(&Tensor::row(&[0.5, 1.0, 2.0]).unwrap());
        let eps = Tensor::row(&[0.4, -1.5, 0.2]).unwrap();
        let loss = lrt_sample(y, sigma, &eps).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[1.0; 3]);
        assert_eq!(g.get(sigma).unwrap().data(), eps.data());
    }

    /// The fused Monte-Carlo loss against the same quantity built from
    /// ordinary tape operations.
    fn composite_mc_loss<'t>(y: Var<'t>, sigma: Var<'t>, eps: &[f64], samples: usize, gold: usize) -> Var<'t> {
        let (rows, width) = y.dims2();
        assert_eq!(rows, 1);
        let mut probs = Vec::new();
        for t in 0..samples {
            let e = Tensor::row(&eps[t * width..(t + 1) * width]).unwrap();
            let corrupted = lrt_sample(y, sigma, &e).unwrap();
            probs.push(corrupted.softmax_rows().unwrap().slice_cols(gold, 1).unwrap());
        }
        let mut acc = probs[0];
        for p in &probs[1..] {
            acc = acc.add(p).unwrap();
        }
        acc.scale(1.0 / samples as f64).unwrap().log().unwrap().neg().unwrap().sum().unwrap()
    }

    #[test]
    fn fused_mc_loss_matches_composite_value_and_gradient() {
        let mut rng = RngStream::new(8, 8);
        for gold in 0..4 {
            let y0 = Tensor::row(&[rng.normal(), rng.normal(), rng.normal(), rng.normal()]).unwrap();
            let s0 = Tensor::row(&[0.3, 1.2, 0.01, 2.0]).unwrap();
            let samples = 7;
            let eps: Vec<f64> = (0..samples * 4).map(|_| rng.normal()).collect();
            let tape = Tape::new();
            let y = tape.leaf(&y0);
            let s = tape.leaf(&s0);
            let fused = y.mc_cross_entropy_rows(&s, &eps, samples, &[Some(gold)]).unwrap().sum().unwrap();
            let comp = composite_mc_loss(y, s, &eps, samples, gold);
            assert!((fused.item().unwrap() - comp.item().unwrap()).abs() < 1e-12);
            let gf = tape.backward(fused).unwrap();
            let gc = tape.backward(comp).unwrap();
            for v in [y, s] {
                for (a, b) in gf.get(v).unwrap().data().iter().zip(gc.get(v).unwrap().data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mc_loss_symmetric_two_class_limit() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::zeros(&[1, 2]));
        let s = tape.constant(Tensor::row(&[1.5, 1.5]).unwrap());
        let samples = 10_000;
        let mut rng = RngStream::new(4, 0);
        let eps: Vec<f64> = (0..samples * 2).map(|_| rng.normal()).collect();
        let l = y.mc_cross_entropy_rows(&s, &eps, samples, &[Some(0)]).unwrap().item().unwrap();
        assert!((l - 2f64.ln()).abs() / 2f64.ln() < 0.02, "{l}");
    }

    #[test]
    fn mc_loss_decreases_with_gold_margin() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::row(&[0.8, 0.8, 0.8]).unwrap());
        let mut rng = RngStream::new(4, 1);
        let eps: Vec<f64> = (0..50 * 3).map(|_| rng.normal()).collect();
        let mut last = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let y = tape.constant(Tensor::row(&[margin, 0.0, 0.0]).unwrap());
            let l = y.mc_cross_entropy_rows(&s, &eps, 50, &[Some(0)]).unwrap().item().unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn zero_variance_aleatoric_equals_gen_loss() {
        let tape = Tape::new();
        let mut rng = RngStream::new(2, 2);
        let y = tape.leaf(&Tensor::new(vec![2, 5], (0..10).map(|_| rng.normal()).collect()).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2, 5]));
        let targets = vec![Some(1), Some(4)];
        let plain = DecodeOutput {
            logits: vec![y],
            variances: vec![zero],
            targets: vec![targets],
            counts: vec![1, 1],
        };
        let streams = [RngStream::new(1, 0), RngStream::new(1, 1)];
        let ce = gen_loss_per_example(&plain).unwrap().to_vec();
        for t in [1, 3, 20] {
            // √0 has no derivative, so route σ = 0 through the fused op directly
            let eps = lrt_noise(&streams, 0, t, 5);
            let mc = y.mc_cross_entropy_rows(&zero, &eps, t, &plain.targets[0]).unwrap();
            let inv = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
            assert_eq!(mc.scale_rows(&inv).unwrap().to_vec(), ce);
        }
    }

    #[test]
    fn distorted_loss_branches() {
        let tape = Tape::new();
        let f = |a: f64, b: f64, alpha: f64| {
            let pa = tape.leaf(&Tensor::scalar(a).unwrap());
            let pb = tape.leaf(&Tensor::scalar(b).unwrap());
            distorted_loss(pa, pb, alpha).unwrap().item().unwrap()
        };
        assert_eq!(f(1.3, 1.3, 1.0), 0.0);
        assert_eq!(f(1.3, 1.3, 5.0), 0.0);
        assert!((f(0.0, 2f64.ln(), 1.0) + 0.5).abs() < 1e-15);
        assert!((f(0.5, 0.2, 1.0) - 0.3).abs() < 1e-15);
        let mut last = f64::NEG_INFINITY;
        for i in -40..40 {
            let v = f(i as f64 * 0.1, 0.0, 2.0);
            assert!(v > last);
            last = v;
        }
        let pa = tape.leaf(&Tensor::scalar(0.0).unwrap());
        assert!(distorted_loss(pa, pa, 0.0).is_err());
    }

    #[test]
    fn refinement_limits_and_hand_evaluation() {
        let tape = Tape::new();
        let g = tape.leaf(&Tensor::row(&[0.5, -1.0, 2.0, 0.25]).unwrap());
        let mu1 = tape.leaf(&Tensor::row(&[1.0, 0.5, -0.5, 2.0]).unwrap());
        let mu2 = tape.leaf(&Tensor::row(&[0.0, -1.5, 1.0, 1.0]).unwrap());
        let grad = Tensor::row(&[0.2, -0.4, 0.1, 1.0]).unwrap();
        assert_eq!(mumc_refine(g, &[mu1, mu2], &grad, 0.0).unwrap().to_vec(), g.to_vec());
        let zero = Tensor::zeros(&[1, 4]);
        assert_eq!(mumc_refine(g, &[mu1, mu2], &zero, 3.0).unwrap().to_vec(), g.to_vec());
        let gamma = 0.5;
        let refined = mumc_refine(g, &[mu1, mu2], &grad, gamma).unwrap().to_vec();
        // reversed = -0.5·grad = [-0.1, 0.2, -0.05, -0.5]; Σμ = [1, -1, 0.5, 3]
        // ∇' = [-0.1, -0.2, -0.025, -1.5]; g' = g + ∇'⊙g
        let expected = [0.5 - 0.05, -1.0 + 0.2, 2.0 - 0.05, 0.25 - 0.375];
        for (a, b) in refined.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(mumc_refine(g, &[mu1], &Tensor::zeros(&[1, 3]), 1.0).is_err());
    }

    #[test]
    fn total_loss_reduces_correctly() {
        let tape = Tape::new();
        let gen = tape.leaf(&Tensor::scalar(1.7).unwrap());
        let u = tape.leaf(&Tensor::scalar(0.4).unwrap());
        assert_eq!(total_loss(gen, u, 0.0).unwrap().item(), Some(1.7));
        let zero = tape.leaf(&Tensor::scalar(0.0).unwrap());
        assert_eq!(total_loss(gen, zero, 1.0).unwrap().item(), Some(1.7));
        assert!((total_loss(gen, u, 2.0).unwrap().item().unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn decoder_losses_match_finite_differences() {
        let t = toy(3, 4, 3, 6);
        let theta = t.store.flatten();
        let streams = [RngStream::new(9, 0), RngStream::new(9, 1)];
        let g0 = Tensor::from_rows(&[vec![0.4, -0.3, 0.8], vec![-0.6, 0.2, 0.1]]).unwrap();
        let golds: [&[usize]; 2] = [&[BOS, 4, 5, EOS], &[BOS, 5, EOS]];
        let check = grad_check(
            |tape, x| {
                let p = t.store.bind_flat(x)?;
                let noise = Noise::sample(DropoutSpec::bernoulli(0.25), &streams);
                let masks = t.dec.sample_masks(noise, 2)?;
                let g = tape.constant(g0.clone());
                let out = decode_teacher_forced(&t.dec, &t.emb, &p, g, &golds, &masks)?;
                let lp = gen_loss_per_example(&out)?;
                let ly = aleatoric_mc_loss_per_example(&out, 4, &streams)?;
                let lu = distorted_loss(lp, ly, 1.0)?.sum()?.scale(0.5)?;
                total_loss(gen_loss(&out)?, lu, 1.0)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-5, "{}", check.max_rel_error);
    }

    #[test]
    fn greedy_tie_break_and_termination() {
        let mut t = toy(3, 3, 2, 6);
        zero_all(&mut t.store);
        let tape = Tape::new();
        let p = t.store.bind(&tape);
        let g = tape.constant(Tensor::row(&[0.1, 0.2, 0.3]).unwrap());
        let s = generate_greedy(&t.dec, &t.emb, &p, g, 5, &LstmMasks::default()).unwrap();
        assert_eq!(s[0].tokens, vec![0; 5]);
        assert_eq!(s[0].logits.len(), 5);

        let t = toy(3, 3, 4, 6);
        let p = t.store.bind(&tape);
        for max_len in [1, 3, 16] {
            for s in generate_greedy(&t.dec, &t.emb, &p, g, max_len, &LstmMasks::default()).unwrap() {
                assert!(s.tokens.len() == max_len || s.tokens.last() == Some(&EOS));
                assert!(s.tokens.len() <= max_len);
                assert!(s.uncertainty >= 0.0);
            }
        }
        assert!(generate_greedy(&t.dec, &t.emb, &p, g, 0, &LstmMasks::default()).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn mc_mean_with_identical_rows_equals_greedy() {
        let t = toy(3, 3, 4, 6);
        let tape = Tape::new();
        let p = t.store.bind(&tape);
        let one = Tensor::row(&[0.1, -0.7, 0.3]).unwrap();
        let g1 = tape.constant(one.clone());
        let g3 = tape.constant(Tensor::from_rows(&[one.data().to_vec(), one.data().to_vec(), one.data().to_vec()]).unwrap());
        let greedy = generate_greedy(&t.dec, &t.emb, &p, g1, 8, &LstmMasks::default()).unwrap();
        let mean = generate_mc_mean(&t.dec, &t.emb, &p, g3, 8, &LstmMasks::default()).unwrap();
        assert_eq!(greedy[0].tokens, mean.tokens);
    }
}
