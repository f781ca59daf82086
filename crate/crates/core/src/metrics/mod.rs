//! Image fidelity (PSNR, SSIM) and embedding retrieval scores (FRR, FCR).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};
use crate::psi::FeatureExtractor;
use crate::synth::Image;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_TOP_K: usize = 5;
pub const REPORT_HEADER: &str = "group,n,psnr_db,ssim,frr_pct,fcr_pct";

fn same_shape(x: &Image, y: &Image) -> Result<()> {
    ensure!(
        x.height() == y.height() && x.width() == y.width(),
        "image shapes differ: {}x{} vs {}x{}",
        x.height(),
        x.width(),
        y.height(),
        y.width()
    );
    Ok(())
}

/// Peak signal-to-noise ratio over all channels jointly, capped for
/// identical images.
pub fn psnr(x: &Image, y: &Image, max_val: f64) -> Result<f64> {
    same_shape(x, y)?;
    let n = x.data().len() as f64;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let mid = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable weighted filter over every fully-contained window.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let taps = p.taps();
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / mu_a.len() as f64
}

/// Mean structural similarity over Gaussian-weighted windows, averaged
/// over channels.
pub fn ssim_with(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w) = (x.height(), x.width());
    ensure!(
        h.min(w) >= p.window,
        "image {h}x{w} is smaller than the {} pixel window",
        p.window
    );
    if x == y {
        return Ok(1.0);
    }
    let s: f64 = (0..3).map(|c| ssim_channel(x.channel(c), y.channel(c), h, w, p)).sum();
    Ok(s / 3.0)
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    ssim_with(x, y, &SsimParams::default())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest gallery rows to `query`, closest first,
/// ties going to the lower index.
pub fn top_k(query: &[f64], gallery: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(i, g)| (sq_dist(query, g), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

/// An embedding labelled with the identity it shows.
pub type Labelled = (u32, Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Retrieval {
    pub hits: usize,
    pub queries: usize,
}

impl Retrieval {
    pub fn percent(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            100.0 * self.hits as f64 / self.queries as f64
        }
    }
}

/// Whether each query's identity is among its top-`k` gallery matches.
pub fn retrieval_hits(queries: &[Labelled], gallery: &[Labelled], k: usize) -> Result<Vec<bool>> {
    ensure!(k > 0, "k must be positive");
    ensure!(
        gallery.len() >= k,
        "gallery of {} is smaller than k = {k}",
        gallery.len()
    );
    let ids: BTreeSet<u32> = gallery.iter().map(|(i, _)| *i).collect();
    let rows: Vec<Vec<f64>> = gallery.iter().map(|(_, e)| e.clone()).collect();
    Ok(queries
        .iter()
        .map(|(id, q)| {
            if !ids.contains(id) {
                log::warn!("identity {id} has no gallery entry; counted as a miss");
                return false;
            }
            top_k(q, &rows, k).iter().any(|&j| gallery[j].0 == *id)
        })
        .collect())
}

pub fn frr_embeddings(queries: &[Labelled], gallery: &[Labelled], k: usize) -> Result<Retrieval> {
    let hits = retrieval_hits(queries, gallery, k)?;
    Ok(Retrieval {
        hits: hits.iter().filter(|&&h| h).count(),
        queries: hits.len(),
    })
}

/// Cross-style retrieval: every face of each style queried against every
/// other style's set.
pub fn fcr_embeddings(by_style: &BTreeMap<u32, Vec<Labelled>>, k: usize) -> Result<Retrieval> {
    ensure!(by_style.len() >= 2, "consistency needs at least 2 styles, got {}", by_style.len());
    let id_set = |v: &[Labelled]| -> Vec<u32> {
        let mut ids: Vec<u32> = v.iter().map(|(i, _)| *i).collect();
        ids.sort_unstable();
        ids
    };
    let (first_style, first) = by_style.iter().next().expect("non-empty");
    let reference = id_set(first);
    for (style, set) in by_style {
        if id_set(set) != reference {
            return Err(Error::InvalidArgument(format!(
                "style {style} covers different identities than style {first_style}"
            )));
        }
    }
    let mut total = Retrieval { hits: 0, queries: 0 };
    for (s, queries) in by_style {
        for (t, gallery) in by_style {
            if s == t {
                continue;
            }
            let r = frr_embeddings(queries, gallery, k.min(gallery.len()))?;
            total.hits += r.hits;
            total.queries += r.queries;
        }
    }
    Ok(total)
}

const EMBED_CHUNK: usize = 64;

/// ψ-embeddings of `images`, computed in fixed-size chunks.
pub fn embed_images(psi: &dyn FeatureExtractor, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let items: Vec<Tensor> = chunk.iter().map(|i| i.to_tensor()).collect();
        let refs: Vec<&Tensor> = items.iter().collect();
        out.extend(psi.embed(&Tensor::stack_batch(&refs)?)?);
    }
    Ok(out)
}

pub fn frr(recovered: &[(u32, Image)], gallery: &[(u32, Image)], psi: &dyn FeatureExtractor, k: usize) -> Result<f64> {
    let q = labelled(psi, recovered)?;
    let g = labelled(psi, gallery)?;
    Ok(frr_embeddings(&q, &g, k)?.percent())
}

pub fn fcr(recovered_by_style: &BTreeMap<u32, Vec<(u32, Image)>>, psi: &dyn FeatureExtractor, k: usize) -> Result<f64> {
    let mut by_style = BTreeMap::new();
    for (s, set) in recovered_by_style {
        by_style.insert(*s, labelled(psi, set)?);
    }
    Ok(fcr_embeddings(&by_style, k)?.percent())
}

fn labelled(psi: &dyn FeatureExtractor, set: &[(u32, Image)]) -> Result<Vec<Labelled>> {
    let imgs: Vec<&Image> = set.iter().map(|(_, i)| i).collect();
    let embs = embed_images(psi, &imgs)?;
    Ok(set.iter().map(|(i, _)| *i).zip(embs).collect())
}

/// One evaluated test pair.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub identity: u32,
    pub style: u32,
    pub seen: bool,
    pub input: Image,
    pub recovered: Image,
    pub truth: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub group: String,
    pub n: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub frr_pct: f64,
    /// Undefined for groups with a single style.
    pub fcr_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<GroupMetrics>,
}

impl MetricsReport {
    pub fn row(&self, group: &str) -> Option<&GroupMetrics> {
        self.rows.iter().find(|r| r.group == group)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let fcr = r.fcr_pct.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(s, "{},{},{:.6},{:.6},{:.6},{}", r.group, r.n, r.psnr_db, r.ssim, r.frr_pct, fcr).unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<16} {:>5} {:>10} {:>8} {:>8} {:>8}\n",
            "group", "n", "PSNR(dB)", "SSIM", "FRR(%)", "FCR(%)"
        );
        for r in &self.rows {
            let fcr = r.fcr_pct.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
            writeln!(
                s,
                "{:<16} {:>5} {:>10.3} {:>8.4} {:>8.2} {:>8}",
                r.group, r.n, r.psnr_db, r.ssim, r.frr_pct, fcr
            )
            .unwrap();
        }
        s
    }
}

struct Embedded<'a> {
    sample: &'a EvalSample,
    image: &'a Image,
    emb: Vec<f64>,
}

fn group_metrics(group: String, members: &[&Embedded], gallery: &[Labelled], k: usize) -> Result<GroupMetrics> {
    let n = members.len();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for m in members {
        psnr_sum += psnr(m.image, &m.sample.truth, 1.0)?;
        ssim_sum += ssim(m.image, &m.sample.truth)?;
    }
    let queries: Vec<Labelled> = members.iter().map(|m| (m.sample.identity, m.emb.clone())).collect();
    let frr = frr_embeddings(&queries, gallery, k)?.percent();
    let mut by_style: BTreeMap<u32, Vec<Labelled>> = BTreeMap::new();
    for m in members {
        by_style.entry(m.sample.style).or_default().push((m.sample.identity, m.emb.clone()));
    }
    let fcr = if by_style.len() >= 2 {
        Some(fcr_embeddings(&by_style, k)?.percent())
    } else {
        None
    };
    Ok(GroupMetrics {
        group,
        n,
        psnr_db: psnr_sum / n as f64,
        ssim: ssim_sum / n as f64,
        frr_pct: frr,
        fcr_pct: fcr,
    })
}

/// Rows per style, then seen, unseen and all, for the recovered images;
/// then `input_*` rows scoring the stylized inputs the same way.
pub fn build_report(
    samples: &[EvalSample],
    gallery: &[(u32, Image)],
    psi: &dyn FeatureExtractor,
    k: usize,
) -> Result<MetricsReport> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let gallery = labelled(psi, gallery)?;
    let mut rows = Vec::new();
    for (prefix, pick) in [("", true), ("input_", false)] {
        let imgs: Vec<&Image> = samples.iter().map(|s| if pick { &s.recovered } else { &s.input }).collect();
        let embs = embed_images(psi, &imgs)?;
        let embedded: Vec<Embedded> = samples
            .iter()
            .zip(imgs)
            .zip(embs)
            .map(|((sample, image), emb)| Embedded { sample, image, emb })
            .collect();
        let select = |f: &dyn Fn(&EvalSample) -> bool| -> Vec<&Embedded> {
            embedded.iter().filter(|e| f(e.sample)).collect()
        };
        let styles: BTreeSet<u32> = samples.iter().map(|s| s.style).collect();
        if pick {
            for s in &styles {
                let members = select(&|e| e.style == *s);
                rows.push(group_metrics(format!("style_{s}"), &members, &gallery, k)?);
            }
        }
        for (name, f) in [
            ("seen", &(|e: &EvalSample| e.seen) as &dyn Fn(&EvalSample) -> bool),
            ("unseen", &|e: &EvalSample| !e.seen),
            ("all", &|_: &EvalSample| true),
        ] {
            let members = select(f);
            if !members.is_empty() {
                rows.push(group_metrics(format!("{prefix}{name}"), &members, &gallery, k)?);
            }
        }
    }
    Ok(MetricsReport { rows })
}
