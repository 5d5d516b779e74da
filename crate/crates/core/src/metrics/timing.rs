use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;

use crate::error::{Error, Result};

pub const MIN_REPEATS: usize = 5;

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VpsReport {
    /// Median videos per second.
    pub vps: f64,
    pub per_repeat: Vec<f64>,
    /// Output length → (median milliseconds per video, videos).
    pub by_length: BTreeMap<usize, (f64, usize)>,
}

/// Times `decode` over videos `0..videos`, `repeats` times after one warm-up
/// call. `decode` returns the output length, used for the per-length buckets.
pub fn measure_vps<F>(videos: usize, repeats: usize, mut decode: F) -> Result<VpsReport>
where
    F: FnMut(usize) -> Result<usize>,
{
    if videos == 0 {
        return Err(Error::Empty("timing corpus"));
    }
    let repeats = if repeats < MIN_REPEATS {
        warn!("{repeats} timing repeats raised to {MIN_REPEATS}");
        MIN_REPEATS
    } else {
        repeats
    };
    decode(0)?;
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut samples: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for _ in 0..repeats {
        let start = Instant::now();
        for v in 0..videos {
            let t = Instant::now();
            let len = decode(v)?;
            samples
                .entry(len)
                .or_default()
                .push(t.elapsed().as_secs_f64() * 1e3);
        }
        per_repeat.push(videos as f64 / start.elapsed().as_secs_f64());
    }
    let by_length = samples
        .into_iter()
        .map(|(l, ms)| (l, (median(&ms), ms.len() / repeats)))
        .collect();
    Ok(VpsReport {
        vps: median(&per_repeat),
        per_repeat,
        by_length,
    })
}

/// Median milliseconds of `run(length)` for each length, over `repeats`
/// interleaved rounds after one warm-up round.
pub fn time_lengths<F>(lengths: &[usize], repeats: usize, mut run: F) -> Result<Vec<(usize, f64)>>
where
    F: FnMut(usize) -> Result<()>,
{
    let repeats = repeats.max(MIN_REPEATS);
    for &l in lengths {
        run(l)?;
    }
    let mut ms: Vec<Vec<f64>> = vec![Vec::with_capacity(repeats); lengths.len()];
    for _ in 0..repeats {
        for (i, &l) in lengths.iter().enumerate() {
            let t = Instant::now();
            run(l)?;
            ms[i].push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(lengths
        .iter()
        .zip(&ms)
        .map(|(&l, m)| (l, median(m)))
        .collect())
}

/// Median videos per second for each of `settings` decoder configurations.
///
/// Rounds are interleaved (every setting once per round, over all videos) so
/// slow drift in machine speed affects all settings alike.
pub fn compare_vps<F>(
    videos: usize,
    settings: usize,
    repeats: usize,
    mut decode: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, usize) -> Result<()>,
{
    if videos == 0 {
        return Err(Error::Empty("timing corpus"));
    }
    let repeats = repeats.max(MIN_REPEATS);
    for s in 0..settings {
        decode(s, 0)?;
    }
    let mut rates: Vec<Vec<f64>> = vec![Vec::with_capacity(repeats); settings];
    for _ in 0..repeats {
        for (s, r) in rates.iter_mut().enumerate() {
            let start = Instant::now();
            for v in 0..videos {
                decode(s, v)?;
            }
            r.push(videos as f64 / start.elapsed().as_secs_f64());
        }
    }
    Ok(rates.iter().map(|r| median(r)).collect())
}
