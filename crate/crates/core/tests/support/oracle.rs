//! Brute-force CMC and AP from explicit ranks.

use pit_core::retrieval::ItemMeta;

pub struct OracleQuery {
    pub first_match: Option<usize>,
    pub average_precision: Option<f64>,
}

pub struct OracleReport {
    pub queries: Vec<OracleQuery>,
    pub cmc: Vec<f64>,
    pub map: Option<f64>,
}

/// The rank of gallery item `g` is one plus the number of eligible items
/// strictly ahead of it (smaller distance, or equal distance and smaller
/// video id).
pub fn oracle(dist: &[Vec<f64>], queries: &[ItemMeta], gallery: &[ItemMeta]) -> OracleReport {
    let mut out = Vec::new();
    for (q, row) in queries.iter().zip(dist) {
        let eligible: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].person_id == q.person_id && gallery[g].camera_id == q.camera_id))
            .collect();
        let ahead = |g: usize| {
            eligible
                .iter()
                .filter(|&&o| {
                    row[o] < row[g] || (row[o] == row[g] && gallery[o].video_id < gallery[g].video_id)
                })
                .count()
        };
        let mut ranks: Vec<usize> = eligible
            .iter()
            .filter(|&&g| gallery[g].person_id == q.person_id)
            .map(|&g| ahead(g) + 1)
            .collect();
        ranks.sort_unstable();
        let ap = if ranks.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                sum += (i + 1) as f64 / *r as f64;
            }
            Some(sum / ranks.len() as f64)
        };
        out.push(OracleQuery {
            first_match: ranks.first().copied(),
            average_precision: ap,
        });
    }
    let valid: Vec<&OracleQuery> = out.iter().filter(|q| q.first_match.is_some()).collect();
    let cmc = (1..=gallery.len())
        .map(|k| {
            let hits = valid.iter().filter(|q| q.first_match.unwrap() <= k).count();
            hits as f64 / valid.len() as f64
        })
        .collect();
    let map = if valid.is_empty() {
        None
    } else {
        let mut sum = 0.0;
        for q in &valid {
            sum += q.average_precision.unwrap();
        }
        Some(sum / valid.len() as f64)
    };
    OracleReport { queries: out, cmc, map }
}

/// Random instance with at most 10 gallery items, integer distances (many
/// ties), three identities and three cameras.
pub fn random_instance(rng: &mut impl rand::Rng) -> (Vec<Vec<f64>>, Vec<ItemMeta>, Vec<ItemMeta>) {
    let nq = rng.gen_range(1..=4);
    let ng = rng.gen_range(1..=10);
    let mut vids: Vec<usize> = (0..ng).collect();
    rand::seq::SliceRandom::shuffle(vids.as_mut_slice(), rng);
    let mut meta = |video_id| ItemMeta {
        person_id: rng.gen_range(0..3),
        camera_id: rng.gen_range(0..3),
        video_id,
    };
    let queries: Vec<ItemMeta> = (0..nq).map(|i| meta(100 + i)).collect();
    let gallery: Vec<ItemMeta> = vids.into_iter().map(&mut meta).collect();
    let dist = (0..nq)
        .map(|_| (0..ng).map(|_| rng.gen_range(0..4) as f64).collect())
        .collect();
    (dist, queries, gallery)
}

/// Runs `count` random instances and returns how many matched exactly, how
/// many had a valid query, and the first mismatch description.
pub fn compare_with_oracle(count: usize, seed: u64) -> (usize, usize, Option<String>) {
    use pit_core::retrieval::evaluate_distances;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut matched, mut evaluated, mut first_bad) = (0, 0, None);
    for i in 0..count {
        let (dist, q, g) = random_instance(&mut rng);
        let want = oracle(&dist, &q, &g);
        let got = evaluate_distances(&dist, &q, &g);
        let ok = match (&got, want.map) {
            (Err(pit_core::Error::NoValidQueries), None) => true,
            (Ok(r), Some(map)) => {
                evaluated += 1;
                r.map == map
                    && r.cmc == want.cmc
                    && r.queries.iter().zip(&want.queries).all(|(a, b)| {
                        a.first_match == b.first_match && a.average_precision == b.average_precision
                    })
            }
            _ => false,
        };
        if ok {
            matched += 1;
        } else if first_bad.is_none() {
            first_bad = Some(format!("instance {i}: dist {dist:?} queries {q:?} gallery {g:?}"));
        }
    }
    (matched, evaluated, first_bad)
}
