//! Plain nested-`Vec` reference implementations used as test oracles.
//! Nothing here touches the tape.

#![allow(dead_code)]

use refflow::fusion::{ModelConfig, ModelInputs, TwinBackbone};
use refflow::Tensor;

pub type M = Vec<Vec<f64>>;

pub fn m(t: &Tensor) -> M {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn row(v: &[f64]) -> M {
    vec![v.to_vec()]
}

pub fn mm(a: &M, b: &M) -> M {
    let n = b[0].len();
    a.iter()
        .map(|ar| {
            (0..n)
                .map(|j| ar.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn tr(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_bcast(a: &M, r: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

pub fn vcat(a: &M, b: &M) -> M {
    a.iter().chain(b.iter()).cloned().collect()
}

pub fn max_diff(a: &M, t: &Tensor) -> f64 {
    let b = m(t);
    assert_eq!(a.len(), b.len());
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Row softmax; `keep[i][j] == false` drops entry `j` from row `i`.
pub fn softmax(a: &M, keep: Option<&Vec<Vec<bool>>>) -> M {
    a.iter()
        .enumerate()
        .map(|(i, r)| {
            let ok = |j: usize| keep.is_none_or(|k| k[i][j]);
            let mx = r
                .iter()
                .enumerate()
                .filter(|(j, _)| ok(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r
                .iter()
                .enumerate()
                .map(|(j, v)| if ok(j) { (v - mx).exp() } else { 0.0 })
                .collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Loop-form scaled dot-product attention.
pub fn attend(q: &M, k: &M, v: &M, keep: Option<&Vec<Vec<bool>>>) -> M {
    let d = q[0].len() as f64;
    let scores: M = q
        .iter()
        .map(|qi| {
            k.iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect()
        })
        .collect();
    let w = softmax(&scores, keep);
    w.iter()
        .map(|wi| {
            (0..v[0].len())
                .map(|c| wi.iter().zip(v).map(|(a, vr)| a * vr[c]).sum())
                .collect()
        })
        .collect()
}

pub fn rope(x: &M, pos: &[usize], base: f64) -> M {
    let d = x[0].len();
    x.iter()
        .zip(pos)
        .map(|(r, &p)| {
            let mut out = r.clone();
            for j in 0..d / 2 {
                let a = p as f64 * base.powf(-((2 * j) as f64) / d as f64);
                let (x0, x1) = (r[2 * j], r[2 * j + 1]);
                out[2 * j] = x0 * a.cos() - x1 * a.sin();
                out[2 * j + 1] = x0 * a.sin() + x1 * a.cos();
            }
            out
        })
        .collect()
}

pub fn layer_norm(x: &M) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mu) / (var + 1e-6).sqrt()).collect()
        })
        .collect()
}

pub fn gelu(x: &M) -> M {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|r| {
            r.iter()
                .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh()))
                .collect()
        })
        .collect()
}

/// Straight-line forward of the whole twin backbone.
pub struct Oracle<'a> {
    pub model: &'a TwinBackbone,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> M {
        m(&self.model.params().get(name).unwrap_or_else(|| panic!("{name}")).value)
    }

    fn blk(&self, i: usize, b: &str, rest: &str) -> M {
        self.p(&format!("blocks.{i}.{b}.{rest}"))
    }

    fn cfg(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn time_embed(&self, t: f64) -> Vec<f64> {
        let d = self.cfg().width;
        let half = d / 2;
        let mut f = vec![0.0; d];
        for j in 0..half {
            let w = 10_000f64.powf(-(j as f64) / half as f64);
            f[j] = (1000.0 * t * w).cos();
            f[half + j] = (1000.0 * t * w).sin();
        }
        let h = gelu(&mm(&row(&f), &self.p("time.mlp_in")));
        mm(&h, &self.p("time.mlp_out")).remove(0)
    }

    fn modulation(&self, i: usize, b: &str, temb: &[f64]) -> [Vec<f64>; 4] {
        let d = self.cfg().width;
        let all = mm(&gelu(&row(temb)), &self.blk(i, b, "modulation")).remove(0);
        [0, 1, 2, 3].map(|k| all[k * d..(k + 1) * d].to_vec())
    }

    fn modnorm(x: &M, shift: &[f64], scale: &[f64]) -> M {
        layer_norm(x)
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(c, v)| v * (1.0 + scale[c]) + shift[c])
                    .collect()
            })
            .collect()
    }

    fn lora(&self, i: usize, b: &str, which: &str, x: &M) -> M {
        let base = mm(x, &self.blk(i, b, &format!("self_attn.{which}")));
        let down = self.blk(i, b, &format!("self_attn.lora_{which}.down"));
        let up = self.blk(i, b, &format!("self_attn.lora_{which}.up"));
        add(&base, &mm(&mm(x, &down), &up))
    }

    fn cross(&self, i: usize, b: &str, sub: &str, xq: &M, xkv: &M) -> M {
        let w = |k: &str| self.blk(i, b, &format!("{sub}.{k}"));
        let z = attend(&mm(xq, &w("q")), &mm(xkv, &w("k")), &mm(xkv, &w("v")), None);
        mm(&z, &w("o"))
    }

    /// Returns `(v_video, v_audio)`.
    pub fn forward(&self, inputs: &ModelInputs, mask_refs: bool) -> (M, M) {
        let cfg = self.cfg().clone();
        let base = cfg.rope_base;
        let names = ["video", "audio"];
        let lat = [m(&inputs.video), m(&inputs.audio)];
        let refs_in = [inputs.ref_image.as_ref(), inputs.ref_audio.as_ref()];
        let conds: [Option<Vec<f64>>; 2] = match &inputs.embeddings {
            Some(e) => [Some(e.face.clone()), Some(e.timbre.clone())],
            None => [None, None],
        };
        let mut x: Vec<M> = (0..2).map(|s| mm(&lat[s], &self.p(&format!("{}.token_in", names[s])))).collect();
        let mut r: Vec<Option<M>> = (0..2)
            .map(|s| {
                refs_in[s]
                    .filter(|t| t.rows() > 0)
                    .map(|t| mm(&m(t), &self.p(&format!("{}.token_in", names[s]))))
            })
            .collect();
        let table = m(&self.model.params().get("text.table").unwrap().value);
        let text: M = table[inputs.text_id * cfg.text_seq..(inputs.text_id + 1) * cfg.text_seq].to_vec();
        let te = self.time_embed(inputs.t);
        let te0 = self.time_embed(0.0);

        for i in 0..cfg.depth {
            let mt: Vec<_> = names.iter().map(|b| self.modulation(i, b, &te)).collect();
            let mr: Vec<_> = names.iter().map(|b| self.modulation(i, b, &te0)).collect();
            for s in 0..2 {
                let b = names[s];
                let n = x[s].len();
                let pos: Vec<usize> = (0..n).collect();
                let h = Self::modnorm(&x[s], &mt[s][0], &mt[s][1]);
                let w = |k: &str| self.blk(i, b, &format!("self_attn.{k}"));
                let q = rope(&mm(&h, &w("q")), &pos, base);
                let k = rope(&mm(&h, &w("k")), &pos, base);
                let v = mm(&h, &w("v"));
                let out = match &r[s] {
                    None => mm(&attend(&q, &k, &v, None), &w("o")),
                    Some(rr) => {
                        let nr = rr.len();
                        let rpos: Vec<usize> = (n..n + nr).collect();
                        let hr = Self::modnorm(rr, &mr[s][0], &mr[s][1]);
                        let qr = rope(&self.lora(i, b, "q", &hr), &rpos, base);
                        let kr = rope(&self.lora(i, b, "k", &hr), &rpos, base);
                        let vr = self.lora(i, b, "v", &hr);
                        let zr = attend(&qr, &kr, &vr, None);
                        let out_r = self.lora(i, b, "o", &zr);
                        r[s] = Some(add(rr, &out_r));
                        let keep: Vec<Vec<bool>> = (0..n).map(|_| (0..n + nr).map(|j| !mask_refs || j < n).collect()).collect();
                        let z = attend(&q, &vcat(&k, &kr), &vcat(&v, &vr), Some(&keep));
                        mm(&z, &w("o"))
                    }
                };
                let out = match &conds[s] {
                    Some(c) => add_bcast(&out, &mm(&row(c), &self.blk(i, b, "global_proj"))[0]),
                    None => out,
                };
                x[s] = add(&x[s], &out);
            }
            for s in 0..2 {
                let c = self.cross(i, names[s], "text_attn", &layer_norm(&x[s]), &text);
                x[s] = add(&x[s], &c);
            }
            let nv = layer_norm(&x[0]);
            let na = layer_norm(&x[1]);
            let pv = self.cross(i, "video", "paired_attn", &nv, &na);
            let pa = self.cross(i, "audio", "paired_attn", &na, &nv);
            x[0] = add(&x[0], &pv);
            x[1] = add(&x[1], &pa);
            for s in 0..2 {
                let b = names[s];
                let mlp = |h: &M| mm(&gelu(&mm(h, &self.blk(i, b, "mlp.fc1"))), &self.blk(i, b, "mlp.fc2"));
                x[s] = add(&x[s], &mlp(&Self::modnorm(&x[s], &mt[s][2], &mt[s][3])));
                if let Some(rr) = &r[s] {
                    let upd = mlp(&Self::modnorm(rr, &mr[s][2], &mr[s][3]));
                    r[s] = Some(add(rr, &upd));
                }
            }
        }
        let out: Vec<M> = (0..2)
            .map(|s| mm(&layer_norm(&x[s]), &self.p(&format!("{}.token_out", names[s]))))
            .collect();
        (out[0].clone(), out[1].clone())
    }
}

/// Gives every zero-initialized trainable tensor random values.
pub fn perturb_trainables(model: &mut TwinBackbone, std: f64, seed: u64) {
    let mut rng = refflow::seed::stream(seed, "perturb");
    for p in model.params_mut().params_mut().filter(|p| p.trainable) {
        p.value = Tensor::randn(p.value.shape(), std, &mut rng);
    }
}
