//! Property tests for the algebraic invariants: mean linearity, noisify
//! linearity, geometry scale covariance, and file-format round-trips.

use proptest::prelude::*;

use crossinit::diagnostics::{
    export_trajectory, geometry, parse_trajectory_csv, SlotGeometry, TrajectoryPoint,
    TrajectoryRecord,
};
use crossinit::diffusion::{noisify, NoiseSchedule};
use crossinit::embedding::{
    load_concept, mean_name_embedding, save_concept, ConceptEmbedding, EmbeddingVector,
    InitStrategy, NameList, ToyEmbeddingTable,
};

const FIRST_NAMES: [&str; 8] = [
    "john", "mary", "david", "anna", "james", "lisa", "peter", "sara",
];
const LAST_NAMES: [&str; 8] = [
    "smith", "jones", "chen", "garcia", "lee", "brown", "kim", "patel",
];

fn name_entries(indices: &[usize]) -> Vec<(String, String)> {
    indices
        .iter()
        .map(|&i| {
            (
                FIRST_NAMES[i % 8].to_string(),
                LAST_NAMES[(i / 8) % 8].to_string(),
            )
        })
        .collect()
}

fn finite_f64() -> impl Strategy<Value = f64> {
    any::<u64>()
        .prop_map(f64::from_bits)
        .prop_filter("finite", |v| v.is_finite())
}

/// Values in a range where sums/products stay well-conditioned.
fn tame_f64() -> impl Strategy<Value = f64> {
    (-1e6f64..1e6f64).prop_filter("nonzero-ish", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_is_linear_over_concatenation(
        a in prop::collection::vec(0usize..64, 1..6),
        b in prop::collection::vec(0usize..64, 1..6),
    ) {
        let table = ToyEmbeddingTable::new(16, 5);
        let list_a = NameList::new(name_entries(&a)).unwrap();
        let list_b = NameList::new(name_entries(&b)).unwrap();
        let mut combined = name_entries(&a);
        combined.extend(name_entries(&b));
        let list_ab = NameList::new(combined).unwrap();

        let mean_a = mean_name_embedding(&list_a, &table).unwrap();
        let mean_b = mean_name_embedding(&list_b, &table).unwrap();
        let mean_ab = mean_name_embedding(&list_ab, &table).unwrap();

        let (na, nb) = (a.len() as f64, b.len() as f64);
        for slot in 0..2 {
            for c in 0..16 {
                let weighted = (na * mean_a.vector(slot).values()[c]
                    + nb * mean_b.vector(slot).values()[c])
                    / (na + nb);
                let got = mean_ab.vector(slot).values()[c];
                prop_assert!((got - weighted).abs() <= 1e-12 * got.abs().max(1.0));
            }
        }
    }

    #[test]
    fn noisify_is_linear_and_shape_preserving(
        z0 in prop::collection::vec(tame_f64(), 8),
        w0 in prop::collection::vec(tame_f64(), 8),
        e0 in prop::collection::vec(tame_f64(), 8),
        e1 in prop::collection::vec(tame_f64(), 8),
        alpha in -4.0f64..4.0,
        beta in -4.0f64..4.0,
        t in 0usize..100,
    ) {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mixed_z: Vec<f64> = z0.iter().zip(&w0).map(|(a, b)| alpha * a + beta * b).collect();
        let mixed_e: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = noisify(&mixed_z, &mixed_e, t, &schedule).unwrap();
        let za = noisify(&z0, &e0, t, &schedule).unwrap();
        let zb = noisify(&w0, &e1, t, &schedule).unwrap();
        prop_assert_eq!(lhs.len(), 8);
        for j in 0..8 {
            let rhs = alpha * za[j] + beta * zb[j];
            prop_assert!((lhs[j] - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn geometry_is_scale_covariant(
        v in prop::collection::vec(-100.0f64..100.0, 8),
        r in prop::collection::vec(-100.0f64..100.0, 8),
        alpha in 1e-3f64..1e3,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        prop_assume!(r.iter().any(|x| x.abs() > 1e-6));
        let ev = EmbeddingVector::new(v.clone()).unwrap();
        let er = EmbeddingVector::new(r.clone()).unwrap();
        let scaled = EmbeddingVector::new(v.iter().map(|x| alpha * x).collect()).unwrap();
        let g = geometry(&ev, &er).unwrap();
        let gs = geometry(&scaled, &er).unwrap();
        prop_assert!((gs.norm_ratio - alpha * g.norm_ratio).abs()
            <= 1e-9 * (alpha * g.norm_ratio).abs().max(1e-12));
        prop_assert!((gs.cosine - g.cosine).abs() <= 1e-9);
        // cosine also invariant under positive scaling of the reference
        let scaled_ref = EmbeddingVector::new(r.iter().map(|x| alpha * x).collect()).unwrap();
        let gr = geometry(&ev, &scaled_ref).unwrap();
        prop_assert!((gr.cosine - g.cosine).abs() <= 1e-9);
    }

    #[test]
    fn concept_file_round_trip_any_finite_values(
        f_values in prop::collection::vec(finite_f64(), 6),
        l_values in prop::collection::vec(finite_f64(), 6),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let concept = ConceptEmbedding::new(
            vec![
                ("f".into(), EmbeddingVector::new(f_values).unwrap()),
                ("l".into(), EmbeddingVector::new(l_values).unwrap()),
            ],
            InitStrategy::Cross,
        )
        .unwrap();
        save_concept(&concept, &path, serde_json::Map::new()).unwrap();
        let (loaded, _) = load_concept(&path).unwrap();
        prop_assert_eq!(loaded, concept);
    }

    #[test]
    fn trajectory_csv_round_trip_at_declared_precision(
        raw in prop::collection::vec((tame_f64(), tame_f64(), tame_f64(), tame_f64()), 1..8),
    ) {
        let points: Vec<TrajectoryPoint> = raw
            .iter()
            .enumerate()
            .map(|(i, (a, b, c, d))| TrajectoryPoint {
                step: i,
                total_loss: a.abs(),
                diffusion_loss: b.abs(),
                reg_loss: c.abs(),
                per_slot: vec![
                    SlotGeometry {
                        slot: "f".into(),
                        norm: a.abs(),
                        norm_ratio_to_init: b.abs(),
                        cosine_to_init: (*c / 1e6).clamp(-1.0, 1.0),
                        cosine_to_encoder_output: (*d / 1e6).clamp(-1.0, 1.0),
                    },
                    SlotGeometry {
                        slot: "l".into(),
                        norm: d.abs(),
                        norm_ratio_to_init: c.abs(),
                        cosine_to_init: (*a / 1e6).clamp(-1.0, 1.0),
                        cosine_to_encoder_output: (*b / 1e6).clamp(-1.0, 1.0),
                    },
                ],
                concat: SlotGeometry {
                    slot: "concat".into(),
                    norm: a.abs() + d.abs(),
                    norm_ratio_to_init: 1.0,
                    cosine_to_init: 1.0,
                    cosine_to_encoder_output: 0.0,
                },
            })
            .collect();
        let record = TrajectoryRecord::from_points(points).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        export_trajectory(&record, &path).unwrap();
        let rows = parse_trajectory_csv(&path).unwrap();
        prop_assert_eq!(rows.len(), record.len() * 2);
        let close = |a: f64, b: f64| (a - b).abs() <= 5e-12 * a.abs().max(b.abs()).max(1e-300);
        for (i, p) in record.points().iter().enumerate() {
            for (j, s) in p.per_slot.iter().enumerate() {
                let row = &rows[i * 2 + j];
                prop_assert_eq!(row.step, p.step);
                prop_assert!(close(row.total_loss, p.total_loss));
                prop_assert!(close(row.diffusion_loss, p.diffusion_loss));
                prop_assert!(close(row.reg_loss, p.reg_loss));
                prop_assert!(close(row.norm, s.norm));
                prop_assert!(close(row.norm_ratio, s.norm_ratio_to_init));
                prop_assert!(close(row.cos_init, s.cosine_to_init));
                prop_assert!(close(row.cos_enc, s.cosine_to_encoder_output));
            }
        }
    }
}
