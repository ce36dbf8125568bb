use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sonoscan_core::vector_index::IndexEntry;
use sonoscan_core::{EmbeddingVector, FlatIndex};

fn random_vector(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Exhaustive scan written independently of the index: plain dot products
/// over norms, ordered by score descending then id ascending.
fn oracle(entries: &[(String, Vec<f64>)], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(String, f64)> = entries
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            (id.clone(), dot / (norm(v) * qn))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[test]
fn top_k_matches_exhaustive_oracle() {
    let mut rng = StdRng::seed_from_u64(7);
    let entries: Vec<(String, Vec<f64>)> = (0..1000)
        .map(|i| (format!("v{i:04}"), random_vector(&mut rng, 256)))
        .collect();
    let index = FlatIndex::build(
        256,
        entries.iter().map(|(id, v)| IndexEntry {
            id: id.clone(),
            vector: EmbeddingVector::normalized(v.clone()).unwrap(),
            payload_ref: id.clone(),
        }),
    )
    .unwrap();
    for _ in 0..100 {
        let q = random_vector(&mut rng, 256);
        let qv = EmbeddingVector::normalized(q.clone()).unwrap();
        for k in [1, 3, 10] {
            let got = index.top_k(&qv, k).unwrap();
            let want = oracle(&entries, &q, k);
            let got_ids: Vec<&str> = got.iter().map(|h| h.id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
            assert_eq!(got_ids, want_ids);
            for (h, (_, s)) in got.iter().zip(&want) {
                assert!((h.score - s).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn saved_index_answers_identically() {
    let mut rng = StdRng::seed_from_u64(11);
    let index = FlatIndex::build(
        32,
        (0..50).map(|i| IndexEntry {
            id: format!("e{i}"),
            vector: EmbeddingVector::normalized(random_vector(&mut rng, 32)).unwrap(),
            payload_ref: format!("p{i}"),
        }),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.jsonl");
    index.save(&path).unwrap();
    let loaded = FlatIndex::load(&path).unwrap();
    let q = EmbeddingVector::normalized(random_vector(&mut rng, 32)).unwrap();
    assert_eq!(index.top_k(&q, 10).unwrap(), loaded.top_k(&q, 10).unwrap());
}
