use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::tensor::{ParamId, ParamStore, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Decoder,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" | "enc" => Ok(Role::Encoder),
            "decoder" | "dec" => Ok(Role::Decoder),
            _ => Err(Error::Config(format!("unknown module role `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttentionIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FeedForwardIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderLayer {
    pub self_attn: AttentionIds,
    pub norm1: NormIds,
    pub ffn: FeedForwardIds,
    pub norm2: NormIds,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DecoderLayer {
    pub self_attn: AttentionIds,
    pub norm1: NormIds,
    pub cross_attn: AttentionIds,
    pub norm2: NormIds,
    pub ffn: FeedForwardIds,
    pub norm3: NormIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModule {
    pub(crate) embed: ParamId,
    pub(crate) layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum OutputProjection {
    /// Logits are computed against the embedding table, transposed.
    Tied(ParamId),
    /// A separate `[d×V]` matrix.
    Own(ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModule {
    pub(crate) embed: ParamId,
    pub(crate) layers: Vec<DecoderLayer>,
    pub(crate) output: OutputProjection,
}

/// Encoder, decoder and parameter storage of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModules {
    language: LanguageId,
    config: TransformerConfig,
    params: ParamStore,
    encoder: EncoderModule,
    decoder: DecoderModule,
}

struct Builder<'a> {
    prefix: String,
    slots: &'a mut Vec<Slot>,
}

impl Builder<'_> {
    fn add(&mut self, path: &str, shape: &[usize], init: Init) -> usize {
        self.slots.push(Slot {
            name: format!("{}/{path}", self.prefix),
            shape: shape.to_vec(),
            init,
        });
        self.slots.len() - 1
    }
}

/// Parameter layout in creation order, with each module's ids expressed as
/// positions in that order.
fn layout(lang: &LanguageId, c: &TransformerConfig) -> (Vec<Slot>, EncoderModule, DecoderModule) {
    let (v, d, f) = (c.vocab_size, c.model_dim, c.ffn_dim);
    let mut slots = Vec::new();
    let mut b = Builder {
        prefix: lang.to_string(),
        slots: &mut slots,
    };
    let id = ParamId;
    let (enc_embed, dec_embed) = if c.tied_embeddings {
        let e = b.add("embed", &[v, d], Init::Embedding);
        (e, e)
    } else {
        (
            b.add("enc/embed", &[v, d], Init::Embedding),
            b.add("dec/embed", &[v, d], Init::Embedding),
        )
    };
    fn attention(b: &mut Builder<'_>, p: &str, d: usize) -> AttentionIds {
        let mut w = |n: &str| ParamId(b.add(&format!("{p}/{n}"), &[d, d], Init::Xavier));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut z = |n: &str| ParamId(b.add(&format!("{p}/{n}"), &[d], Init::Zeros));
        AttentionIds {
            wq,
            bq: z("bq"),
            wk,
            bk: z("bk"),
            wv,
            bv: z("bv"),
            wo,
            bo: z("bo"),
        }
    }
    fn norm(b: &mut Builder<'_>, p: &str, d: usize) -> NormIds {
        NormIds {
            gain: ParamId(b.add(&format!("{p}/gain"), &[d], Init::Ones)),
            bias: ParamId(b.add(&format!("{p}/bias"), &[d], Init::Zeros)),
        }
    }
    fn ffn(b: &mut Builder<'_>, p: &str, d: usize, f: usize) -> FeedForwardIds {
        FeedForwardIds {
            w1: ParamId(b.add(&format!("{p}/w1"), &[d, f], Init::Xavier)),
            b1: ParamId(b.add(&format!("{p}/b1"), &[f], Init::Zeros)),
            w2: ParamId(b.add(&format!("{p}/w2"), &[f, d], Init::Xavier)),
            b2: ParamId(b.add(&format!("{p}/b2"), &[d], Init::Zeros)),
        }
    }
    let enc_layers = (0..c.layers)
        .map(|l| {
            let p = format!("enc/layer{l}");
            EncoderLayer {
                self_attn: attention(&mut b, &format!("{p}/self_attn"), d),
                norm1: norm(&mut b, &format!("{p}/norm1"), d),
                ffn: ffn(&mut b, &format!("{p}/ffn"), d, f),
                norm2: norm(&mut b, &format!("{p}/norm2"), d),
            }
        })
        .collect();
    let dec_layers = (0..c.layers)
        .map(|l| {
            let p = format!("dec/layer{l}");
            DecoderLayer {
                self_attn: attention(&mut b, &format!("{p}/self_attn"), d),
                norm1: norm(&mut b, &format!("{p}/norm1"), d),
                cross_attn: attention(&mut b, &format!("{p}/cross_attn"), d),
                norm2: norm(&mut b, &format!("{p}/norm2"), d),
                ffn: ffn(&mut b, &format!("{p}/ffn"), d, f),
                norm3: norm(&mut b, &format!("{p}/norm3"), d),
            }
        })
        .collect();
    let output = if c.tie_output_projection {
        OutputProjection::Tied(id(dec_embed))
    } else {
        OutputProjection::Own(id(b.add("dec/out_proj", &[d, v], Init::Xavier)))
    };
    (
        slots,
        EncoderModule {
            embed: id(enc_embed),
            layers: enc_layers,
        },
        DecoderModule {
            embed: id(dec_embed),
            layers: dec_layers,
            output,
        },
    )
}

fn initial_values(slot: &Slot, d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n: usize = slot.shape.iter().product();
    let uniform = |limit: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n)
            .map(|_| rng.random_range(-limit..limit) as f32)
            .collect()
    };
    match slot.init {
        Init::Embedding => uniform(1.0 / (d as f64).sqrt(), rng),
        Init::Xavier => {
            let fans = (slot.shape[0] + slot.shape[1]) as f64;
            uniform((6.0 / fans).sqrt(), rng)
        }
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    }
}

impl LanguageModules {
    /// Fresh, seeded modules for `language`.
    pub fn new(language: LanguageId, config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (slots, encoder, decoder) = layout(&language, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for slot in &slots {
            let values = initial_values(slot, config.model_dim, &mut rng);
            let tensor = Tensor::new(slot.shape.clone(), values)?;
            params.insert(Parameter::new(slot.name.clone(), tensor))?;
        }
        Ok(LanguageModules {
            language,
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Reassembles modules from stored parameters, which must match the
    /// layout implied by `config` exactly (names, order and shapes).
    pub fn from_params(
        language: LanguageId,
        config: TransformerConfig,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let (slots, encoder, decoder) = layout(&language, &config);
        if slots.len() != params.len() {
            return Err(Error::Integrity(format!(
                "`{language}`: configuration implies {} parameters, found {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.iter().zip(params.iter()) {
            if slot.name != p.name() || slot.shape != p.shape() {
                return Err(Error::Integrity(format!(
                    "`{language}`: expected parameter {} {:?}, found {} {:?}",
                    slot.name,
                    slot.shape,
                    p.name(),
                    p.shape()
                )));
            }
        }
        Ok(LanguageModules {
            language,
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn language(&self) -> &LanguageId {
        &self.language
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &EncoderModule {
        &self.encoder
    }

    pub fn decoder(&self) -> &DecoderModule {
        &self.decoder
    }

    /// Parameters belonging to `role`. With tied embeddings the shared table
    /// belongs to both roles.
    pub fn role_params(&self, role: Role) -> Vec<ParamId> {
        let (enc, dec) = self.role_prefixes();
        let own = match role {
            Role::Encoder => &enc,
            Role::Decoder => &dec,
        };
        let shared = format!("{}/embed", self.language);
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name().starts_with(own.as_str()) || p.name() == shared)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    fn role_prefixes(&self) -> (String, String) {
        (
            format!("{}/enc/", self.language),
            format!("{}/dec/", self.language),
        )
    }

    pub fn set_role_trainable(&mut self, role: Role, on: bool) {
        for id in self.role_params(role) {
            self.params.get_mut(id).set_trainable(on);
        }
    }

    /// Number of distinct parameter buffers.
    pub fn buffer_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(tag: &str) -> LanguageId {
        LanguageId::new(tag).unwrap()
    }

    fn modules(tied: bool) -> LanguageModules {
        let mut c = TransformerConfig::desk(40);
        c.tied_embeddings = tied;
        c.tie_output_projection = tied;
        LanguageModules::new(lang("de"), c, 1).unwrap()
    }

    #[test]
    fn tying_removes_one_table_and_one_projection() {
        let (tied, untied) = (modules(true), modules(false));
        assert_eq!(tied.buffer_count() + 2, untied.buffer_count());
        let (v, d) = (40, 64);
        assert_eq!(
            tied.params().element_count() + 2 * v * d,
            untied.params().element_count()
        );
        assert_eq!(tied.encoder().embed, tied.decoder().embed);
        assert_eq!(tied.decoder().output, OutputProjection::Tied(tied.encoder().embed));
    }

    #[test]
    fn names_are_unique_and_prefixed() {
        let m = modules(false);
        assert!(m.params().iter().all(|p| p.name().starts_with("de/")));
        assert!(m.params().by_name("de/dec/layer1/cross_attn/wq").is_some());
        assert!(m.params().by_name("de/dec/out_proj").is_some());
    }

    #[test]
    fn role_params_partition_except_shared_table() {
        let m = modules(true);
        let enc = m.role_params(Role::Encoder);
        let dec = m.role_params(Role::Decoder);
        let shared: Vec<_> = enc.iter().filter(|i| dec.contains(i)).collect();
        assert_eq!(shared, vec![&m.encoder().embed]);
        assert_eq!(enc.len() + dec.len(), m.buffer_count() + 1);
        let u = modules(false);
        assert_eq!(
            u.role_params(Role::Encoder).len() + u.role_params(Role::Decoder).len(),
            u.buffer_count()
        );
    }

    #[test]
    fn seeded_init_is_reproducible_and_rebuildable() {
        let a = modules(true);
        assert_eq!(a, modules(true));
        let b = LanguageModules::new(lang("de"), a.config().clone(), 2).unwrap();
        assert_ne!(a.params(), b.params());
        let back =
            LanguageModules::from_params(lang("de"), a.config().clone(), a.params().clone()).unwrap();
        assert_eq!(back, a);
        let mut other = a.config().clone();
        other.tied_embeddings = false;
        assert!(LanguageModules::from_params(lang("de"), other, a.params().clone()).is_err());
    }
}
