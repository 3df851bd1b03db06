use proptest::prelude::*;

use pit_core::data::{generate, Image, SyntheticSpec, Split};
use pit_core::division::Direction;
use pit_core::embed::{assemble_z0, patchify, EmbedConfig, EmbedParams};
use pit_core::init::Sampler;
use pit_core::params::{ParamGroup, ParamStore};
use pit_core::pyramid::{BranchLabel, FeaturePyramid};
use pit_core::retrieval::{evaluate, evaluate_distances, DistanceMode, Embedding, GalleryEntry, ItemMeta};
use pit_core::training::{classification_loss, triplet_loss, Sgd};
use pit_core::transformer::{encoder_layer, encoder_layer_with_attention, EncoderLayerParams, TransformerConfig};
use pit_core::video::{fuse, select_keyframes};
use pit_core::{Tape, Tensor};

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Labels with at least two identities of at least two samples each.
fn pk_labels() -> impl Strategy<Value = Vec<usize>> {
    (2usize..4, 2usize..4).prop_map(|(p, q)| (0..p * q).map(|i| i / q).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_and_transpose_round_trip(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let mut s = Sampler::new(seed);
        let data: Vec<f64> = (0..r * c).map(|_| s.normal()).collect();
        let x = tensor(&[r, c], data);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let t = tape.transpose(v).unwrap();
        let back = tape.transpose(t).unwrap();
        prop_assert_eq!(tape.data(back), x.data());
        let flat = tape.reshape(v, &[r * c]).unwrap();
        let back = tape.reshape(flat, &[r, c]).unwrap();
        prop_assert_eq!(tape.value(back), &x);
        let p = tape.reshape(v, &[1, r, c]).unwrap();
        let p = tape.permute(p, &[2, 0, 1]).unwrap();
        let p = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.data(p), x.data());
    }

    #[test]
    fn softmax_sums_to_one(data in values(12), scale in 0.1f64..50.0) {
        let x = tensor(&[3, 4], data.iter().map(|v| v * scale).collect());
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let rows = tape.softmax(v, 1).unwrap();
        for row in tape.data(rows).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let cols = tape.softmax(v, 0).unwrap();
        let d = tape.data(cols);
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| d[i * 4 + j]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn classification_loss_ignores_per_sample_shifts(
        labels in pk_labels(),
        seed in any::<u64>(),
        shift in -20.0f64..20.0,
    ) {
        let (b, nc) = (labels.len(), 5);
        let mut s = Sampler::new(seed);
        let logits: Vec<f64> = (0..b * nc).map(|_| 3.0 * s.normal()).collect();
        let shifts: Vec<f64> = (0..b).map(|i| shift * (i as f64 - 1.0)).collect();
        let shifted: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, v)| v + shifts[i / nc])
            .collect();
        let loss = |data: Vec<f64>| {
            let t = tensor(&[b, nc], data);
            let mut tape = Tape::new();
            let v = tape.input(&t);
            let l = classification_loss(&mut tape, &[v, v], &labels).unwrap();
            tape.value(l).item()
        };
        let (a, c) = (loss(logits), loss(shifted));
        prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, c);
    }

    #[test]
    fn triplet_loss_is_invariant_under_rigid_motion(
        labels in pk_labels(),
        seed in any::<u64>(),
    ) {
        let (b, c) = (labels.len(), 4);
        let mut s = Sampler::new(seed);
        let x: Vec<f64> = (0..b * c).map(|_| s.normal()).collect();
        // Householder reflection I - 2 u u^T followed by a translation.
        let u: Vec<f64> = (0..c).map(|_| s.normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = u.iter().map(|v| v / norm).collect();
        let shift: Vec<f64> = (0..c).map(|_| 5.0 * s.normal()).collect();
        let mut moved = Vec::with_capacity(b * c);
        for row in x.chunks(c) {
            let dot: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
            for j in 0..c {
                moved.push(row[j] - 2.0 * dot * u[j] + shift[j]);
            }
        }
        let loss = |data: Vec<f64>| {
            let t = tensor(&[b, c], data);
            let mut tape = Tape::new();
            let v = tape.input(&t);
            let l = triplet_loss(&mut tape, &[v], &labels).unwrap();
            tape.value(l).item()
        };
        let (a, m) = (loss(x), loss(moved));
        prop_assert!((a - m).abs() <= 1e-9, "{} vs {}", a, m);
    }

    #[test]
    fn fuse_ignores_frame_order(seed in any::<u64>(), k in 1usize..6, perm_seed in any::<u64>()) {
        let mut s = Sampler::new(seed);
        let frames: Vec<Vec<Tensor>> = (0..k)
            .map(|_| (0..3).map(|_| tensor(&[1, 4], (0..4).map(|_| s.normal()).collect())).collect())
            .collect();
        let mut order: Vec<usize> = (0..k).collect();
        use rand::seq::SliceRandom;
        order.shuffle(Sampler::new(perm_seed).rng());
        let fused = |order: &[usize]| {
            let mut tape = Tape::new();
            let pyramids: Vec<FeaturePyramid> = order
                .iter()
                .map(|&f| FeaturePyramid {
                    entries: frames[f]
                        .iter()
                        .enumerate()
                        .map(|(i, t)| (label(i), tape.input(t)))
                        .collect(),
                })
                .collect();
            let out = fuse(&mut tape, &pyramids).unwrap();
            out.features().flat_map(|v| tape.data(v).to_vec()).collect::<Vec<f64>>()
        };
        let identity: Vec<usize> = (0..k).collect();
        for (a, b) in fused(&identity).iter().zip(fused(&order)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fusing_copies_is_exact(seed in any::<u64>(), k in 1usize..9) {
        let mut s = Sampler::new(seed);
        let t = tensor(&[1, 5], (0..5).map(|_| s.normal()).collect());
        let mut tape = Tape::new();
        let v = tape.input(&t);
        let p = FeaturePyramid { entries: vec![(label(0), v)] };
        let out = fuse(&mut tape, &vec![p; k]).unwrap();
        prop_assert_eq!(tape.data(out.entries[0].1), t.data());
    }

    #[test]
    fn keyframes_increase(n in 1usize..200, k in 1usize..20) {
        let idx = select_keyframes(n, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.iter().all(|&i| i < n));
        if n >= k {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn encoder_layer_shapes_and_attention_rows(t in 1usize..9, seed in any::<u64>()) {
        let cfg = TransformerConfig { embed_dim: 6, num_heads: 3, mlp_dim: 12, ln_eps: 1e-6 };
        let mut store = ParamStore::new();
        let mut s = Sampler::new(seed);
        let p = EncoderLayerParams::init(&mut store, &mut s, "l", &cfg, ParamGroup::Backbone);
        let z = tensor(&[t, 6], (0..t * 6).map(|_| s.normal()).collect());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let layer = p.map(|id| bound[id]);
        let zv = tape.input(&z);
        let (out, attn) = encoder_layer_with_attention(&mut tape, zv, &layer, &cfg).unwrap();
        prop_assert_eq!(tape.shape(out), &[t, 6]);
        prop_assert_eq!(tape.shape(attn), &[3, t, t]);
        for row in tape.data(attn).chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zeroed_projections_make_the_layer_an_identity(t in 1usize..9, seed in any::<u64>()) {
        let cfg = TransformerConfig { embed_dim: 4, num_heads: 2, mlp_dim: 8, ln_eps: 1e-6 };
        let mut store = ParamStore::new();
        let mut s = Sampler::new(seed);
        let p = EncoderLayerParams::init(&mut store, &mut s, "l", &cfg, ParamGroup::Backbone);
        for id in [p.wo, p.bo, p.w2, p.b2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let z = tensor(&[t, 4], (0..t * 4).map(|_| s.normal()).collect());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let layer = p.map(|id| bound[id]);
        let zv = tape.input(&z);
        let out = encoder_layer(&mut tape, zv, &layer, &cfg).unwrap();
        prop_assert_eq!(tape.value(out), &z);
    }

    #[test]
    fn camera_enters_z0_as_a_row_constant_term(seed in any::<u64>(), a in 0usize..3, b in 0usize..3) {
        let cfg = EmbedConfig {
            image_height: 28,
            image_width: 28,
            channels: 1,
            kernel: 16,
            stride: 12,
            embed_dim: 4,
            lambda1: 1.0,
            lambda2: 1.5,
            num_cameras: 3,
            pixel_mean: 0.0,
            pixel_std: 1.0,
        };
        let mut store = ParamStore::new();
        let mut s = Sampler::new(seed);
        let p = EmbedParams::init(&mut store, &mut s, &cfg).unwrap();
        let image = Image::new(1, 28, 28, (0..28 * 28).map(|_| s.uniform()).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let params = p.map(|id| bound[id]);
        let f = patchify(&mut tape, &image, &params, &cfg).unwrap();
        let za = assemble_z0(&mut tape, f, a, &params, &cfg).unwrap();
        let zb = assemble_z0(&mut tape, f, b, &params, &cfg).unwrap();
        let diff: Vec<f64> = tape.data(za).iter().zip(tape.data(zb)).map(|(x, y)| x - y).collect();
        let cam = store.get(p.camera).data();
        for row in diff.chunks(4) {
            for j in 0..4 {
                let expected = 1.5 * (cam[a * 4 + j] - cam[b * 4 + j]);
                prop_assert!((row[j] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing(seed in any::<u64>(), momentum in 0.0f64..0.99, epoch in 0usize..10) {
        let mut s = Sampler::new(seed);
        let mut store = ParamStore::new();
        for (i, g) in [ParamGroup::Backbone, ParamGroup::Pyramid, ParamGroup::Head].into_iter().enumerate() {
            store.add(format!("p{i}"), tensor(&[3], (0..3).map(|_| s.normal()).collect()), g);
        }
        let before = store.clone();
        let grads: Vec<Option<Vec<f64>>> = (0..3).map(|_| Some((0..3).map(|_| s.normal()).collect())).collect();
        let mut sgd = Sgd::new(0.0, momentum, 10, 2);
        sgd.step(&mut store, &grads, epoch);
        sgd.step(&mut store, &grads, epoch);
        for id in store.ids() {
            prop_assert_eq!(store.get(id), before.get(id));
        }
    }
}

fn label(part: usize) -> BranchLabel {
    BranchLabel {
        layer: 0,
        direction: Direction::Vertical,
        part: part + 1,
    }
}

/// Small retrieval instance with integer distances so ties are common.
fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<ItemMeta>, Vec<ItemMeta>)> {
    let meta = (0usize..3, 0usize..3).prop_map(|(p, c)| (p, c));
    (
        prop::collection::vec(meta.clone(), 1..4),
        prop::collection::vec(meta, 1..11),
        any::<u64>(),
    )
        .prop_map(|(q, g, seed)| {
            let mut s = Sampler::new(seed);
            let queries: Vec<ItemMeta> = q
                .iter()
                .enumerate()
                .map(|(i, &(person_id, camera_id))| ItemMeta { person_id, camera_id, video_id: 100 + i })
                .collect();
            let gallery: Vec<ItemMeta> = g
                .iter()
                .enumerate()
                .map(|(i, &(person_id, camera_id))| ItemMeta { person_id, camera_id, video_id: i })
                .collect();
            let dist = (0..queries.len())
                .map(|_| (0..gallery.len()).map(|_| (s.uniform() * 4.0).floor()).collect())
                .collect();
            (dist, queries, gallery)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cmc_is_monotone(case in instance()) {
        let (dist, q, g) = case;
        let Ok(r) = evaluate_distances(&dist, &q, &g) else { return Ok(()) };
        prop_assert_eq!(r.cmc.len(), g.len());
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&r.map));
    }

    #[test]
    fn map_is_invariant_under_monotone_transforms(case in instance()) {
        let (dist, q, g) = case;
        let Ok(r) = evaluate_distances(&dist, &q, &g) else { return Ok(()) };
        let warped: Vec<Vec<f64>> = dist
            .iter()
            .map(|row| row.iter().map(|d| (d * 0.7).exp() - 3.0).collect())
            .collect();
        let w = evaluate_distances(&warped, &q, &g).unwrap();
        prop_assert_eq!(r.map, w.map);
        prop_assert_eq!(r.cmc, w.cmc);
    }

    #[test]
    fn same_camera_same_identity_entries_never_count(case in instance(), d in 0.0f64..4.0) {
        let (dist, q, g) = case;
        let (dist, q) = (&dist[..1], &q[..1]);
        let before = evaluate_distances(dist, q, &g);
        let mut g2 = g.clone();
        g2.push(ItemMeta { person_id: q[0].person_id, camera_id: q[0].camera_id, video_id: 50 });
        let dist2: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().copied().chain([d]).collect()).collect();
        let after = evaluate_distances(&dist2, q, &g2);
        match (before, after) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.map, b.map);
                prop_assert_eq!(&a.queries[0].ranked_video_ids, &b.queries[0].ranked_video_ids);
                prop_assert_eq!(&a.cmc[..], &b.cmc[..a.cmc.len()]);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "query validity changed"),
        }
    }
}

#[test]
fn raw_pixels_separate_noise_free_identities() {
    for seed in 0..4 {
        let spec = SyntheticSpec {
            num_ids: 8,
            videos_per_id: 3,
            frames_per_video: 4,
            num_cameras: 2,
            channels: 3,
            height: 40,
            width: 28,
            noise: 0.0,
            test_ids: 6,
            seed,
        };
        let entry = |v: &pit_core::data::VideoSample| {
            let n = v.frames[0].data().len();
            let mut mean = vec![0.0; n];
            for f in &v.frames {
                for (m, x) in mean.iter_mut().zip(f.data()) {
                    *m += x / v.frames.len() as f64;
                }
            }
            GalleryEntry {
                embedding: Embedding { branches: vec![mean] },
                meta: ItemMeta { person_id: v.person_id, camera_id: v.camera_id, video_id: v.video_id },
            }
        };
        let videos = generate(&spec).unwrap();
        let queries: Vec<_> = videos.iter().filter(|t| t.split == Split::Query).map(|t| entry(&t.sample)).collect();
        let gallery: Vec<_> = videos.iter().filter(|t| t.split == Split::Gallery).map(|t| entry(&t.sample)).collect();
        let r = evaluate(&queries, &gallery, DistanceMode::Concat).unwrap();
        assert_eq!(r.map, 1.0, "seed {seed}");
        assert_eq!(r.rank(1), 1.0, "seed {seed}");
    }
}
