use prism_core::wire::{is_canonical, Matrix, ModelValue, ValueMap};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-1_000_000i64..1_000_000).prop_map(|i| i as f64),
        -1e3f64..1e3,
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
    ]
}

fn scalar() -> impl Strategy<Value = ModelValue> {
    prop_oneof![
        Just(ModelValue::Null),
        any::<bool>().prop_map(ModelValue::Bool),
        finite().prop_map(ModelValue::Number),
        "\\PC{0,12}".prop_map(ModelValue::String),
    ]
}

fn matrix() -> impl Strategy<Value = ModelValue> {
    (1usize..4, 1usize..5)
        .prop_flat_map(|(r, c)| prop::collection::vec(finite(), r * c).prop_map(move |d| (r, c, d)))
        .prop_map(|(r, c, d)| ModelValue::Matrix(Matrix::new(r, c, d).unwrap()))
}

fn any_value() -> impl Strategy<Value = ModelValue> {
    let leaf = prop_oneof![4 => scalar(), 1 => matrix()];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(ModelValue::List),
            prop::collection::vec(("[a-zA-Z_.][a-zA-Z0-9_.]{0,10}", inner), 0..6)
                .prop_map(|kv| ModelValue::Map(kv.into_iter().collect::<ValueMap>())),
        ]
    })
}

/// Values on which the boxed codec must round-trip exactly.
pub fn canonical() -> impl Strategy<Value = ModelValue> {
    any_value().prop_filter("not canonical", is_canonical)
}
