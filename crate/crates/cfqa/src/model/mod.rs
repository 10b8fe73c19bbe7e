//! The backbone encoder and its prediction heads.
//!
//! A small bidirectional transformer: token + position embeddings, a stack
//! of post-norm self-attention blocks, and one-hidden-layer MLP classifiers
//! for paragraph support, sentence support, span start/end, and answer
//! type. All arithmetic runs on the autodiff tape, for training and
//! inference alike.

pub mod checkpoint;
pub mod heads;
pub mod layout;
pub mod tape;

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::TokenId;
use crate::corpus::Paragraph;
use crate::effects::BiasMode;
use crate::util::rng::{normal_f64, substream, Stream};
use crate::{Error, Result};
pub use heads::HeadOutputs;
pub use layout::{build_layout, build_triple_layout, ParaSpan, SentSpan, SeqLayout};
pub use tape::{Grads, Mat, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Hidden width `d`.
    pub hidden_dim: usize,
    pub layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// One hidden layer inside each classifier head (`false` = plain linear).
    pub head_hidden: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            layers: 2,
            attention_heads: 4,
            ffn_dim: 128,
            max_seq_len: 128,
            head_hidden: true,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("backbone config: {m}")));
        if self.hidden_dim == 0 || self.layers == 0 || self.attention_heads == 0 || self.ffn_dim == 0
        {
            return fail("all dimensions must be positive");
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return fail("hidden_dim must be divisible by attention_heads");
        }
        if self.max_seq_len < 4 {
            return fail("max_seq_len must be at least 4");
        }
        Ok(())
    }
}

struct AttnIds {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    bq: Vec<ParamId>,
    bk: Vec<ParamId>,
    bv: Vec<ParamId>,
    wo: Vec<ParamId>,
    bo: ParamId,
}

struct LayerIds {
    attn: AttnIds,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// One classifier head `g`: optional hidden layer (width `d`, tanh) plus an
/// output projection.
pub(crate) struct MlpIds {
    pub w1: Option<ParamId>,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub(crate) struct HeadIds {
    pub para: MlpIds,
    pub sent: MlpIds,
    pub start: MlpIds,
    pub end: MlpIds,
    pub ty: MlpIds,
}

pub(crate) struct BiasIds {
    pub c_ans: ParamId,
    pub c_supp: ParamId,
    pub c_type: ParamId,
}

/// Encoder output for one `(q, s, c)` input, plus its position map.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    /// Example the input came from, when known (branch passes set it).
    pub example_id: Option<String>,
    /// Which paragraph is focal in a branch pass.
    pub focal_index: Option<usize>,
    pub hidden: Mat,
    pub layout: SeqLayout,
}

pub struct Model {
    pub config: BackboneConfig,
    pub vocab_size: usize,
    pub bias_mode: BiasMode,
    pub params: ParamStore,
    ids: ModelIds,
}

pub(crate) struct ModelIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    pub heads: HeadIds,
    pub bias: BiasIds,
}

const INIT_STD: f64 = 0.02;

impl Model {
    pub fn new(config: BackboneConfig, vocab_size: usize, bias_mode: BiasMode) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let mut params = ParamStore::new();
        let rng = &mut substream(config.seed, Stream::ParamInit, 0);
        let d = config.hidden_dim;
        let dh = d / config.attention_heads;

        let mut randn = |params: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal_f64(rng) * INIT_STD).collect();
            params.add(name, rows, cols, data)
        };
        let zeros = |params: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            params.add(name, rows, cols, vec![0.0; rows * cols])
        };
        let ones = |params: &mut ParamStore, name: &str, cols: usize| {
            params.add(name, 1, cols, vec![1.0; cols])
        };

        let tok_emb = randn(&mut params, "tok_emb", vocab_size, d);
        let pos_emb = randn(&mut params, "pos_emb", config.max_seq_len, d);
        let emb_ln_g = ones(&mut params, "emb_ln.g", d);
        let emb_ln_b = zeros(&mut params, "emb_ln.b", 1, d);

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            let mut bq = Vec::new();
            let mut bk = Vec::new();
            let mut bv = Vec::new();
            let mut wo = Vec::new();
            for h in 0..config.attention_heads {
                wq.push(randn(&mut params, &format!("l{l}.h{h}.wq"), d, dh));
                wk.push(randn(&mut params, &format!("l{l}.h{h}.wk"), d, dh));
                wv.push(randn(&mut params, &format!("l{l}.h{h}.wv"), d, dh));
                bq.push(zeros(&mut params, &format!("l{l}.h{h}.bq"), 1, dh));
                bk.push(zeros(&mut params, &format!("l{l}.h{h}.bk"), 1, dh));
                bv.push(zeros(&mut params, &format!("l{l}.h{h}.bv"), 1, dh));
                wo.push(randn(&mut params, &format!("l{l}.h{h}.wo"), dh, d));
            }
            let bo = zeros(&mut params, &format!("l{l}.attn.bo"), 1, d);
            let ln1_g = ones(&mut params, &format!("l{l}.ln1.g"), d);
            let ln1_b = zeros(&mut params, &format!("l{l}.ln1.b"), 1, d);
            let ff_w1 = randn(&mut params, &format!("l{l}.ff.w1"), d, config.ffn_dim);
            let ff_b1 = zeros(&mut params, &format!("l{l}.ff.b1"), 1, config.ffn_dim);
            let ff_w2 = randn(&mut params, &format!("l{l}.ff.w2"), config.ffn_dim, d);
            let ff_b2 = zeros(&mut params, &format!("l{l}.ff.b2"), 1, d);
            let ln2_g = ones(&mut params, &format!("l{l}.ln2.g"), d);
            let ln2_b = zeros(&mut params, &format!("l{l}.ln2.b"), 1, d);
            layers.push(LayerIds {
                attn: AttnIds {
                    wq,
                    wk,
                    wv,
                    bq,
                    bk,
                    bv,
                    wo,
                    bo,
                },
                ln1_g,
                ln1_b,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
                ln2_g,
                ln2_b,
            });
        }

        // Head init scales steer how strongly each loss pulls on the shared
        // trunk early in training. The span losses start large (softmax over
        // every context position) and would otherwise monopolize the
        // encoder, starving the support classifiers whose features are
        // purely relational; the support heads therefore start wide and the
        // span heads narrow.
        let support_std = 2.0 / (d as f64).sqrt();
        let span_std = 0.02;
        let mut mlp = |params: &mut ParamStore, name: &str, out: usize, std: f64| -> MlpIds {
            let mut randh = |params: &mut ParamStore, name: &str, rows: usize, cols: usize| {
                let data = (0..rows * cols).map(|_| normal_f64(rng) * std).collect();
                params.add(name, rows, cols, data)
            };
            if config.head_hidden {
                MlpIds {
                    w1: Some(randh(params, &format!("head.{name}.w1"), d, d)),
                    b1: Some(zeros(params, &format!("head.{name}.b1"), 1, d)),
                    w2: randh(params, &format!("head.{name}.w2"), d, out),
                    b2: zeros(params, &format!("head.{name}.b2"), 1, out),
                }
            } else {
                MlpIds {
                    w1: None,
                    b1: None,
                    w2: randh(params, &format!("head.{name}.w2"), d, out),
                    b2: zeros(params, &format!("head.{name}.b2"), 1, out),
                }
            }
        };
        let heads = HeadIds {
            para: mlp(&mut params, "para", 2, support_std),
            sent: mlp(&mut params, "sent", 2, support_std),
            start: mlp(&mut params, "start", 1, span_std),
            end: mlp(&mut params, "end", 1, span_std),
            ty: mlp(&mut params, "type", 4, support_std),
        };

        // Counterfactual bias C, initialized at zero; shapes follow the mode.
        let (ans_len, supp_len, type_len) = match bias_mode {
            BiasMode::Random => (config.max_seq_len, 2, 4),
            BiasMode::Uniform => (1, 1, 1),
        };
        let bias = BiasIds {
            c_ans: zeros(&mut params, "bias.c_ans", 1, ans_len),
            c_supp: zeros(&mut params, "bias.c_supp", 1, supp_len),
            c_type: zeros(&mut params, "bias.c_type", 1, type_len),
        };

        let ids = ModelIds {
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            heads,
            bias,
        };
        Ok(Self {
            config,
            vocab_size,
            bias_mode,
            params,
            ids,
        })
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Run the encoder over a prepared layout; returns the `n x d` output
    /// node.
    pub(crate) fn encode_on_tape(&self, tape: &mut Tape, layout: &SeqLayout) -> NodeId {
        let d = self.config.hidden_dim;
        let dh = d / self.config.attention_heads;
        let x = tape.gather_rows(self.ids.tok_emb, layout.tokens.clone());
        let mut x = tape.add_positions(x, self.ids.pos_emb);
        let scale = 1.0 / (dh as f64).sqrt();
        // Pre-norm blocks with a final output norm.
        for layer in &self.ids.layers {
            let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b);
            let mut head_outs = Vec::with_capacity(self.config.attention_heads);
            for h in 0..self.config.attention_heads {
                let q = tape.linear(normed, layer.attn.wq[h], Some(layer.attn.bq[h]));
                let k = tape.linear(normed, layer.attn.wk[h], Some(layer.attn.bk[h]));
                let v = tape.linear(normed, layer.attn.wv[h], Some(layer.attn.bv[h]));
                let scores = tape.matmul_nt(q, k);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                let ctx = tape.matmul(attn, v);
                head_outs.push(tape.linear(ctx, layer.attn.wo[h], None));
            }
            let attn_out = tape.add_n(head_outs);
            let attn_out = tape.add_bias(attn_out, layer.attn.bo);
            x = tape.add(x, attn_out);
            let normed2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b);
            let ff = tape.linear(normed2, layer.ff_w1, Some(layer.ff_b1));
            let ff = tape.gelu(ff);
            let ff = tape.linear(ff, layer.ff_w2, Some(layer.ff_b2));
            x = tape.add(x, ff);
        }
        tape.layer_norm(x, self.ids.emb_ln_g, self.ids.emb_ln_b)
    }

    /// Apply classifier head `g` to the rows of `x`.
    pub(crate) fn head_on_tape(&self, tape: &mut Tape, x: NodeId, head: &MlpIds) -> NodeId {
        match (head.w1, head.b1) {
            (Some(w1), Some(b1)) => {
                let h = tape.linear(x, w1, Some(b1));
                let h = tape.tanh(h);
                tape.linear(h, head.w2, Some(head.b2))
            }
            _ => tape.linear(x, head.w2, Some(head.b2)),
        }
    }

    /// Encode the factual input: the question with the full paragraph set.
    pub fn encode_context(
        &self,
        example_id: Option<&str>,
        question: &[TokenId],
        paragraphs: &[Paragraph],
    ) -> Result<EncodedSequence> {
        let layout = build_layout(question, paragraphs, self.config.max_seq_len)?;
        let mut tape = Tape::new(&self.params);
        let out = self.encode_on_tape(&mut tape, &layout);
        Ok(EncodedSequence {
            example_id: example_id.map(str::to_string),
            focal_index: None,
            hidden: tape.value(out),
            layout,
        })
    }

    /// Encode a `(q, s, c)` triple with `s` at its original position.
    pub fn encode_triple(
        &self,
        example_id: &str,
        question: &[TokenId],
        focal: &Paragraph,
        focal_index: usize,
        context: &[Paragraph],
    ) -> Result<EncodedSequence> {
        let (layout, pos) =
            build_triple_layout(question, focal, focal_index, context, self.config.max_seq_len)?;
        let mut tape = Tape::new(&self.params);
        let out = self.encode_on_tape(&mut tape, &layout);
        Ok(EncodedSequence {
            example_id: Some(example_id.to_string()),
            focal_index: Some(pos),
            hidden: tape.value(out),
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen::{generate_dataset, GenConfig};

    fn tiny_model(seed: u64) -> (Model, Vec<crate::corpus::Example>) {
        let cfg = GenConfig {
            num_examples: 3,
            entity_pool_size: 40,
            seed,
            ..GenConfig::default()
        };
        let vocab = cfg.vocabulary().unwrap();
        let examples = generate_dataset(&cfg).unwrap();
        let backbone = BackboneConfig {
            hidden_dim: 16,
            layers: 2,
            attention_heads: 2,
            ffn_dim: 32,
            max_seq_len: 96,
            head_hidden: true,
            seed,
        };
        (
            Model::new(backbone, vocab.len(), BiasMode::Random).unwrap(),
            examples,
        )
    }

    #[test]
    fn encode_is_deterministic() {
        let (model, examples) = tiny_model(3);
        let ex = &examples[0];
        let a = model
            .encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)
            .unwrap();
        let b = model
            .encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)
            .unwrap();
        assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn encode_row_count_matches_layout() {
        let (model, examples) = tiny_model(4);
        let ex = &examples[0];
        let rep = model
            .encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)
            .unwrap();
        assert_eq!(rep.hidden.rows, rep.layout.len());
        assert_eq!(rep.hidden.cols, 16);
    }

    #[test]
    fn encoder_output_is_finite() {
        let (model, examples) = tiny_model(5);
        for ex in &examples {
            let rep = model
                .encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)
                .unwrap();
            assert!(rep.hidden.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn empty_question_is_rejected() {
        let (model, examples) = tiny_model(6);
        let ex = &examples[0];
        assert!(model.encode_context(None, &[], &ex.paragraphs).is_err());
    }

    // Position-map audit oracle: permuting distractor order moves the map
    // consistently; tokens at mapped offsets are invariant per title.
    #[test]
    fn distractor_permutation_keeps_span_content() {
        let (model, examples) = tiny_model(7);
        let ex = &examples[0];
        let rep = model
            .encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)
            .unwrap();

        let mut permuted = ex.paragraphs.clone();
        let dist: Vec<usize> = permuted
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_gold)
            .map(|(i, _)| i)
            .collect();
        permuted.swap(dist[0], dist[1]);
        let rep2 = model
            .encode_context(Some(&ex.id), &ex.question, &permuted)
            .unwrap();

        for p in &ex.paragraphs {
            let i1 = rep.layout.paragraph_index(&p.title).unwrap();
            let i2 = rep2.layout.paragraph_index(&p.title).unwrap();
            let s1 = &rep.layout.paragraphs[i1];
            let s2 = &rep2.layout.paragraphs[i2];
            assert_eq!(
                &rep.layout.tokens[s1.start..s1.end],
                &rep2.layout.tokens[s2.start..s2.end],
                "span content for {} changed",
                p.title
            );
        }
    }
}
