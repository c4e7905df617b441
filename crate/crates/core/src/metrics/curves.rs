use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::regimes::Regime;

pub const CURVE_HEADER: &str = "regime,q,beta,bpp,map50,map5095,psnr_db,msssim";
pub const DELTA_HEADER: &str =
    "regime,reference,bpp,reference_bpp,delta_map50,delta_map5095,delta_psnr_db,delta_msssim";

/// One operating point of a trained model pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub regime: Regime,
    pub q: u8,
    pub beta: f64,
    pub bpp: f64,
    pub map50: f64,
    pub map5095: f64,
    /// `f64::INFINITY` for lossless reconstructions.
    pub psnr_db: f64,
    pub msssim: f64,
}

impl CurvePoint {
    fn validate(&self) -> Result<()> {
        let ok = self.bpp > 0.0
            && self.bpp.is_finite()
            && (self.psnr_db > 0.0 || self.psnr_db == f64::INFINITY)
            && (0.0..=1.0).contains(&self.msssim)
            && (0.0..=1.0).contains(&self.map50)
            && (0.0..=1.0).contains(&self.map5095);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid curve point {self:?}")))
        }
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{:.6}",
            self.regime,
            self.q,
            self.beta,
            self.bpp,
            self.map50,
            self.map5095,
            fmt_db(self.psnr_db),
            self.msssim
        )
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// CSV text per regime plus the nearest-rate delta table.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub per_regime: BTreeMap<Regime, String>,
    pub deltas: String,
}

fn sorted_by_bpp(points: &[&CurvePoint]) -> Vec<CurvePoint> {
    let mut v: Vec<CurvePoint> = points.iter().map(|p| (*p).clone()).collect();
    v.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(a.q.cmp(&b.q)).then(a.beta.total_cmp(&b.beta)));
    v
}

/// For every point of `curve`, the difference to the `reference` point of
/// nearest bpp (ties go to the lower rate). Rows are
/// `(bpp, reference_bpp, [map50, map5095, psnr_db, msssim] deltas)`.
pub fn nearest_deltas(curve: &[CurvePoint], reference: &[CurvePoint]) -> Vec<(f64, f64, [f64; 4])> {
    let refs = sorted_by_bpp(&reference.iter().collect::<Vec<_>>());
    sorted_by_bpp(&curve.iter().collect::<Vec<_>>())
        .iter()
        .filter_map(|p| {
            let r = refs
                .iter()
                .min_by(|a, b| (a.bpp - p.bpp).abs().total_cmp(&(b.bpp - p.bpp).abs()))?;
            Some((
                p.bpp,
                r.bpp,
                [
                    p.map50 - r.map50,
                    p.map5095 - r.map5095,
                    p.psnr_db - r.psnr_db,
                    p.msssim - r.msssim,
                ],
            ))
        })
        .collect()
}

/// Groups points by regime, sorts each group by bpp and renders CSV.
pub fn build_curves(points: &[CurvePoint]) -> Result<Curves> {
    if points.is_empty() {
        return Err(Error::Contract("no curve points".into()));
    }
    let mut groups: BTreeMap<Regime, Vec<CurvePoint>> = BTreeMap::new();
    for p in points {
        p.validate()?;
        groups.entry(p.regime).or_default().push(p.clone());
    }
    for g in groups.values_mut() {
        *g = sorted_by_bpp(&g.iter().collect::<Vec<_>>());
    }
    let per_regime = groups
        .iter()
        .map(|(r, pts)| (*r, points_to_csv(pts)))
        .collect();
    let mut deltas = format!("{DELTA_HEADER}\n");
    for (ra, a) in &groups {
        for (rb, b) in groups.iter().filter(|(rb, _)| *rb != ra) {
            for (bpp, rbpp, d) in nearest_deltas(a, b) {
                let _ = writeln!(
                    deltas,
                    "{ra},{rb},{bpp:.6},{rbpp:.6},{:.6},{:.6},{},{:.6}",
                    d[0],
                    d[1],
                    fmt_db(d[2]),
                    d[3]
                );
            }
        }
    }
    Ok(Curves { per_regime, deltas })
}

/// Writes `curves_<REGIME>.csv` per regime and `curve_deltas.csv` into
/// `dir`; returns the written paths.
pub fn write_curves(dir: impl AsRef<Path>, points: &[CurvePoint]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let curves = build_curves(points)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (r, text) in &curves.per_regime {
        let path = dir.join(format!("curves_{r}.csv"));
        fs::write(&path, text)?;
        written.push(path);
    }
    let path = dir.join("curve_deltas.csv");
    fs::write(&path, &curves.deltas)?;
    written.push(path);
    Ok(written)
}

/// Renders points, in the given order, under [`CURVE_HEADER`].
pub fn points_to_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for p in points {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// Parses CSV written by [`points_to_csv`] or [`write_curves`].
pub fn parse_points(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(Error::Config(format!("expected header `{CURVE_HEADER}`"))),
    }
    lines
        .map(|(i, line)| {
            let bad = |what: &str| Error::Config(format!("line {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [regime, q, beta, bpp, map50, map5095, psnr_db, msssim] = f[..] else {
                return Err(bad("expected 8 fields"));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
            let p = CurvePoint {
                regime: regime.parse()?,
                q: q.parse().map_err(|_| bad(&format!("bad q {q:?}")))?,
                beta: num(beta)?,
                bpp: num(bpp)?,
                map50: num(map50)?,
                map5095: num(map5095)?,
                psnr_db: num(psnr_db)?,
                msssim: num(msssim)?,
            };
            p.validate()?;
            Ok(p)
        })
        .collect()
}
