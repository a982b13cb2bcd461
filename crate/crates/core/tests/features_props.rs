mod common;

use common::{model_on, rich_cohort, small_arch};
use expltv::features::DENSE_CLAMP;
use expltv::model::{ExpLtv, Variant};
use expltv::synthcohort::{Dataset, UserRecord};
use proptest::prelude::*;
use std::sync::OnceLock;

fn fixture() -> &'static (Dataset, ExpLtv) {
    static CELL: OnceLock<(Dataset, ExpLtv)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = rich_cohort(300, 21);
        let (model, _, _) = model_on(&data, small_arch(Variant::Full), 3);
        (data, model)
    })
}

fn embedding(model: &ExpLtv, record: &UserRecord) -> Vec<f64> {
    let users = model.encode(std::slice::from_ref(record)).unwrap();
    model.embeddings(&users).unwrap().into_vec()
}

fn sequence_case() -> impl Strategy<Value = (usize, Vec<u32>, Vec<u32>)> {
    let (data, model) = fixture();
    let f = &model.schema.sequence[0];
    let (max_len, vocab) = (f.max_len, f.vocab as u32);
    (0..data.len(), prop::collection::vec(0..vocab + 3, 0..=max_len))
        .prop_flat_map(|(i, seq)| (Just(i), Just(seq.clone()), Just(seq).prop_shuffle()))
}

proptest! {
    #[test]
    fn sequence_order_does_not_matter((i, seq, shuffled) in sequence_case()) {
        let (data, model) = fixture();
        let mut a = data.records[i].clone();
        a.sequences[0] = seq;
        let mut b = a.clone();
        b.sequences[0] = shuffled;
        prop_assert_eq!(embedding(model, &a), embedding(model, &b));
    }

    #[test]
    fn extreme_records_embed_finitely(i in 0usize..300, scale in prop_oneof![Just(1e300), Just(-1e300), -1e6f64..1e6], empty in any::<bool>(), cat in any::<u32>()) {
        let (data, model) = fixture();
        let mut r = data.records[i].clone();
        for x in &mut r.dense {
            *x *= scale;
        }
        for c in &mut r.categorical {
            *c = cat;
        }
        if empty {
            r.sequences[0].clear();
        }
        let encoded = model.schema.encode(&r).unwrap();
        prop_assert!(encoded.dense.iter().all(|x| x.is_finite() && x.abs() <= DENSE_CLAMP));
        for (c, f) in encoded.categorical.iter().zip(&model.schema.categorical) {
            prop_assert!(*c < f.cardinality);
        }
        for (s, f) in encoded.sequences.iter().zip(&model.schema.sequence) {
            prop_assert!(s.iter().all(|&t| t < f.vocab));
        }
        let e = embedding(model, &r);
        prop_assert_eq!(e.len(), model.arch.d1);
        prop_assert!(e.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn embedding_is_a_pure_function() {
    let (data, model) = fixture();
    let users = model.encode(&data.records).unwrap();
    let first = model.embeddings(&users).unwrap();
    assert_eq!(first, model.embeddings(&users).unwrap());
    assert_eq!(first.shape(), (data.len(), model.arch.d1));
    let (again, _, _) = model_on(data, small_arch(Variant::Full), 3);
    assert_eq!(first, again.embeddings(&users).unwrap());
    // one user at a time gives the same rows
    for (i, u) in users.iter().enumerate().take(20) {
        assert_eq!(model.embeddings(std::slice::from_ref(u)).unwrap().row(0), first.row(i));
    }
}

#[test]
fn missing_columns_are_rejected() {
    let (data, model) = fixture();
    let mut r = data.records[0].clone();
    r.dense.pop();
    assert!(matches!(model.schema.encode(&r), Err(expltv::Error::MissingField(_))));
    let mut r = data.records[0].clone();
    r.dense[0] = f64::NAN;
    assert!(model.schema.encode(&r).is_err());
}
