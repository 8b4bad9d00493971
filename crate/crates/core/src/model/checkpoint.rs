//! Binary checkpoint: magic `NSVM`, version, config block, per-block layout
//! section, then named tensor blobs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Attention, Block, DenseFfn, FfnLayer, ModelConfig, NextScaleModel, UnitPrune};
use crate::autodiff::Activation;
use crate::dynrouter::{MoeLayer, RouterNet};
use crate::error::{Error, Result};
use crate::moefy::split_ffn;
use crate::tensor::{read_u32, Tensor};

const MAGIC: &[u8; 4] = b"NSVM";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u32).to_le_bytes())?;
    Ok(())
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Gelu => 0,
        Activation::Relu => 1,
        Activation::Abs => 2,
    }
}

fn activation_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Gelu),
        1 => Ok(Activation::Relu),
        c => Err(Error::Format(format!("unknown activation code {c}"))),
    }
}

fn tensors(model: &NextScaleModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .shared_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (l, b) in model.blocks.iter().enumerate() {
        match &b.ffn {
            FfnLayer::Dense(f) => {
                for (n, t) in [("w1", &f.w1), ("b1", &f.b1), ("w2", &f.w2), ("b2", &f.b2)] {
                    out.push((format!("blocks.{l}.ffn.{n}"), t.clone()));
                }
            }
            FfnLayer::Moe(m) => {
                // Stored in dense layout; experts are re-sliced on load.
                let f = m.experts.reassemble();
                for (n, t) in [("w1", &f.w1), ("b1", &f.b1), ("w2", &f.w2), ("b2", &f.b2)] {
                    out.push((format!("blocks.{l}.ffn.{n}"), t.clone()));
                }
                let assign = m.experts.assignment.iter().map(|&a| a as f64).collect();
                out.push((format!("blocks.{l}.moe.assignment"), Tensor::vector(assign)));
                if let Some(r) = &m.router {
                    for (n, t) in r.named() {
                        out.push((format!("blocks.{l}.router.{n}"), t.clone()));
                    }
                }
            }
        }
    }
    out
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &NextScaleModel) -> Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    for v in [c.d_model, c.depth, c.heads, c.d_ff, c.vocab, c.num_classes, c.scale_sides.len()] {
        put_u32(w, v)?;
    }
    for &s in &c.scale_sides {
        put_u32(w, s)?;
    }
    w.write_all(&[activation_code(c.activation)])?;
    for b in &model.blocks {
        match &b.ffn {
            FfnLayer::Dense(_) => w.write_all(&[0])?,
            FfnLayer::Moe(m) => {
                w.write_all(&[1])?;
                put_u32(w, m.experts.num_experts())?;
                put_u32(w, m.router.as_ref().map_or(0, |r| r.width()))?;
            }
        }
        match &b.prune {
            None => w.write_all(&[0])?,
            Some(p) => {
                w.write_all(&[1])?;
                put_u32(w, p.scales.len())?;
                for &s in &p.scales {
                    put_u32(w, s)?;
                }
                let bytes: Vec<u8> = p.keep.iter().map(|&k| u8::from(k)).collect();
                w.write_all(&bytes)?;
            }
        }
    }
    let ts = tensors(model);
    put_u32(w, ts.len())?;
    for (name, t) in &ts {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

enum Layout {
    Dense,
    /// Router width 0 means no router.
    Moe { experts: usize, router_width: usize },
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<NextScaleModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut head = [0usize; 7];
    for v in head.iter_mut() {
        *v = read_u32(r)? as usize;
    }
    let [d_model, depth, heads, d_ff, vocab, num_classes, k] = head;
    if k > 64 || depth > 1024 {
        return Err(Error::Format("implausible model geometry".into()));
    }
    let scale_sides = (0..k).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        d_model,
        depth,
        heads,
        d_ff,
        vocab,
        num_classes,
        scale_sides,
        activation: activation_from(get_u8(r)?)?,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut layouts = Vec::with_capacity(depth);
    let mut prunes = Vec::with_capacity(depth);
    for _ in 0..depth {
        layouts.push(match get_u8(r)? {
            0 => Layout::Dense,
            1 => Layout::Moe {
                experts: read_u32(r)? as usize,
                router_width: read_u32(r)? as usize,
            },
            c => return Err(Error::Format(format!("unknown block kind {c}"))),
        });
        prunes.push(match get_u8(r)? {
            0 => None,
            _ => {
                let n = read_u32(r)? as usize;
                let scales = (0..n).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                let mut bytes = vec![0u8; d_ff];
                r.read_exact(&mut bytes)?;
                Some(UnitPrune {
                    keep: bytes.into_iter().map(|b| b != 0).collect(),
                    scales,
                })
            }
        });
    }
    let count = read_u32(r)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Format("tensor name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        map.insert(name, Tensor::read_from(r)?);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = map
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let d = d_model;
    let n = config.seq_len();
    let tok_emb = take("tok_emb", &[vocab, d])?;
    let class_emb = take("class_emb", &[num_classes + 1, d])?;
    let pos_emb = take("pos_emb", &[n, d])?;
    let level_emb = take("level_emb", &[k, d])?;
    let ln_f_g = take("ln_f.g", &[d])?;
    let ln_f_b = take("ln_f.b", &[d])?;
    let head_w = take("head.w", &[d, vocab])?;
    let head_b = take("head.b", &[vocab])?;
    let mut blocks = Vec::with_capacity(depth);
    for (l, (layout, prune)) in layouts.into_iter().zip(prunes).enumerate() {
        let mut t = |name: &str, shape: &[usize]| take(&format!("blocks.{l}.{name}"), shape);
        let attn = Attention {
            wq: t("attn.wq", &[d, d])?,
            bq: t("attn.bq", &[d])?,
            wk: t("attn.wk", &[d, d])?,
            bk: t("attn.bk", &[d])?,
            wv: t("attn.wv", &[d, d])?,
            bv: t("attn.bv", &[d])?,
            wo: t("attn.wo", &[d, d])?,
            bo: t("attn.bo", &[d])?,
        };
        let (ln1_g, ln1_b, ln2_g, ln2_b) = (t("ln1.g", &[d])?, t("ln1.b", &[d])?, t("ln2.g", &[d])?, t("ln2.b", &[d])?);
        let dense = DenseFfn {
            w1: t("ffn.w1", &[d_ff, d])?,
            b1: t("ffn.b1", &[d_ff])?,
            w2: t("ffn.w2", &[d, d_ff])?,
            b2: t("ffn.b2", &[d])?,
        };
        let ffn = match layout {
            Layout::Dense => FfnLayer::Dense(dense),
            Layout::Moe { experts, router_width } => {
                let assignment: Vec<usize> = t("moe.assignment", &[d_ff])?
                    .data()
                    .iter()
                    .map(|&v| v as usize)
                    .collect();
                let set = split_ffn(&dense, config.activation, &assignment, experts)
                    .map_err(|e| Error::Format(e.to_string()))?;
                let w = router_width;
                let router = if w > 0 {
                    Some(RouterNet {
                        w1: t("router.w1", &[w, d])?,
                        b1: t("router.b1", &[w])?,
                        w2: t("router.w2", &[w, w])?,
                        b2: t("router.b2", &[w])?,
                        w3: t("router.w3", &[experts, w])?,
                        b3: t("router.b3", &[experts])?,
                    })
                } else {
                    None
                };
                FfnLayer::Moe(MoeLayer { experts: set, router })
            }
        };
        blocks.push(Block {
            ln1_g,
            ln1_b,
            attn,
            ln2_g,
            ln2_b,
            ffn,
            prune,
        });
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }
    Ok(NextScaleModel {
        config,
        tok_emb,
        class_emb,
        pos_emb,
        level_emb,
        blocks,
        ln_f_g,
        ln_f_b,
        head_w,
        head_b,
    })
}

pub fn save_checkpoint(path: &Path, model: &NextScaleModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NextScaleModel> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
