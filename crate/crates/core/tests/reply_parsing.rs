//! Reply parsing: the reference replies, emit/parse duality and tolerance
//! to the usual ways chat models mangle JSON.

use keyfield::mask::TargetRegion;
use keyfield::prompt::{
    parse_stage1, parse_stage2, tolerant_json_extract, ReplyError, SchemaError, Stage1Reply,
    Stage2Reply, TargetObject, YesNo,
};
use keyfield::Bbox;
use proptest::prelude::*;
use serde_json::Value;

const STAGE1: &str = include_str!("data/stage1_reply.reference.txt");
const STAGE2: &str = include_str!("data/stage2_reply.reference.txt");

#[test]
fn reference_stage1_reply() {
    let r = parse_stage1(STAGE1).unwrap();
    assert_eq!(r.answer, YesNo::No);
    assert!(r.reply.starts_with("The image only provides information about a black door"));
    assert_eq!(
        r.objects,
        vec![TargetObject {
            object_id: 0,
            follow_up: "Can you specify the region where you can be kicked open?".into()
        }]
    );
    // [2, 167, 1, 400] swapped per axis
    assert_eq!(r.positions, vec![Bbox::new(1, 167, 2, 400)]);
}

#[test]
fn reference_stage2_reply() {
    let r = parse_stage2(STAGE2).unwrap();
    assert_eq!(
        r.answer,
        "The region where the door can be kicked open is at the bottom half of the door."
    );
    assert_eq!(r.whole_segments, YesNo::Yes);
    assert_eq!(r.which_segment, vec![2, 3, 4, 5, 7]);
    assert!(r.target_position.is_empty());
}

#[test]
fn reference_replies_survive_strict_reemission() {
    let s1 = parse_stage1(STAGE1).unwrap();
    assert_eq!(parse_stage1(&s1.to_json().to_string()).unwrap(), s1);
    let s2 = parse_stage2(STAGE2).unwrap();
    assert_eq!(parse_stage2(&s2.to_json().to_string()).unwrap(), s2);
}

#[test]
fn prose_and_fences_around_the_object() {
    let text = format!("Sure! Here is my answer:\n```json\n{}\n```\nHope that helps.", STAGE2);
    assert_eq!(parse_stage2(&text).unwrap(), parse_stage2(STAGE2).unwrap());
}

#[test]
fn bare_words_and_trailing_commas() {
    let r = parse_stage2(
        "{answer: 'Push here', whole_segments: No, which_segment: [], target_position: [[1,2],[0,0,3,4],],}",
    )
    .unwrap();
    assert_eq!(r.whole_segments, YesNo::No);
    assert_eq!(
        r.target_position,
        vec![
            TargetRegion::Point { x: 1, y: 2 },
            TargetRegion::Rect { x1: 0, y1: 0, x2: 3, y2: 4 }
        ]
    );
}

#[test]
fn invariants_are_enforced() {
    let yes_empty = r#"{"answer":"a","whole segments":"Yes","which segment":[],"target position":[]}"#;
    assert!(matches!(
        parse_stage2(yes_empty),
        Err(ReplyError::Schema(SchemaError::Invariant(_)))
    ));
    let no_empty = r#"{"answer":"a","whole segments":"No","which segment":[1],"target position":[]}"#;
    assert!(matches!(
        parse_stage2(no_empty),
        Err(ReplyError::Schema(SchemaError::Invariant(_)))
    ));
    let mismatch = r#"{"Answer":"No","Reply":"r","Objects name":[[0,"q"]],"Position":[]}"#;
    assert!(matches!(
        parse_stage1(mismatch),
        Err(ReplyError::Schema(SchemaError::Invariant(_)))
    ));
    assert!(matches!(
        parse_stage1(r#"{"Reply":"r"}"#),
        Err(ReplyError::Schema(SchemaError::MissingKey("Answer")))
    ));
    assert!(matches!(parse_stage1("no json here"), Err(ReplyError::Extract(_))));
}

#[test]
fn bad_region_arity_is_rejected() {
    let r = r#"{"answer":"a","whole segments":"No","target position":[[1,2,3]]}"#;
    assert!(matches!(
        parse_stage2(r),
        Err(ReplyError::Schema(SchemaError::InvalidValue { .. }))
    ));
}

// Text the tolerant single-quote form can carry: no quotes or backslashes.
fn plain_text() -> impl Strategy<Value = String> + Clone {
    "[A-Za-z0-9][A-Za-z0-9 ,.?!()-]{0,40}".prop_map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn any_text() -> impl Strategy<Value = String> + Clone {
    "\\PC{1,40}".prop_map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn yes_no() -> impl Strategy<Value = YesNo> {
    prop_oneof![Just(YesNo::Yes), Just(YesNo::No)]
}

fn bbox() -> impl Strategy<Value = Bbox> {
    (0u32..5000, 0u32..5000, 0u32..5000, 0u32..5000)
        .prop_map(|(a, b, c, d)| Bbox::new(a, b, c, d).normalized())
}

fn stage1(text: impl Strategy<Value = String> + Clone) -> impl Strategy<Value = Stage1Reply> {
    (yes_no(), text.clone(), prop::collection::vec((0usize..50, text, bbox()), 0..4)).prop_map(
        |(answer, reply, objs)| Stage1Reply {
            answer,
            reply,
            objects: objs
                .iter()
                .map(|(id, q, _)| TargetObject { object_id: *id, follow_up: q.clone() })
                .collect(),
            positions: objs.iter().map(|o| o.2).collect(),
        },
    )
}

fn region() -> impl Strategy<Value = TargetRegion> {
    prop_oneof![
        (0u32..30, 0u32..30).prop_map(|(x, y)| TargetRegion::Point { x, y }),
        (0u32..30, 0u32..30, 0u32..30, 0u32..30)
            .prop_map(|(x1, y1, x2, y2)| TargetRegion::Rect { x1, y1, x2, y2 }),
    ]
}

fn stage2(text: impl Strategy<Value = String>) -> impl Strategy<Value = Stage2Reply> {
    (
        text,
        yes_no(),
        prop::collection::vec(1u32..40, 0..6),
        prop::collection::vec(region(), 0..4),
    )
        .prop_map(|(answer, whole, mut which, mut target)| {
            match whole {
                YesNo::Yes if which.is_empty() => which.push(1),
                YesNo::No if target.is_empty() => target.push(TargetRegion::Point { x: 0, y: 0 }),
                _ => {}
            }
            Stage2Reply {
                answer,
                whole_segments: whole,
                which_segment: which,
                target_position: target,
            }
        })
}

/// Rewrites strict JSON the way a careless model might: single quotes,
/// trailing commas, prose around the object.
fn mangle(v: &Value) -> String {
    fn go(v: &Value, out: &mut String) {
        match v {
            Value::String(s) => {
                out.push('\'');
                out.push_str(s);
                out.push('\'');
            }
            Value::Array(items) => {
                out.push('[');
                for i in items {
                    go(i, out);
                    out.push_str(", ");
                }
                out.push(']');
            }
            Value::Object(map) => {
                out.push_str("{\n");
                for (k, v) in map {
                    out.push_str(&format!("'{k}': "));
                    go(v, out);
                    out.push_str(",\n");
                }
                out.push('}');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::from("Here is the result you asked for:\n");
    go(v, &mut out);
    out.push_str("\nLet me know if you need more.");
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn stage1_duality(r in stage1(any_text())) {
        prop_assert_eq!(parse_stage1(&r.to_json().to_string()).unwrap(), r.clone());
        prop_assert_eq!(parse_stage1(&serde_json::to_string_pretty(&r.to_json()).unwrap()).unwrap(), r);
    }

    #[test]
    fn stage2_duality(r in stage2(any_text())) {
        prop_assert_eq!(parse_stage2(&r.to_json().to_string()).unwrap(), r);
    }

    #[test]
    fn stage1_tolerates_mangling(r in stage1(plain_text())) {
        prop_assert_eq!(parse_stage1(&mangle(&r.to_json())).unwrap(), r);
    }

    #[test]
    fn stage2_tolerates_mangling(r in stage2(plain_text())) {
        prop_assert_eq!(parse_stage2(&mangle(&r.to_json())).unwrap(), r);
    }

    #[test]
    fn tolerant_accepts_strict_json(v in json_object()) {
        prop_assert_eq!(tolerant_json_extract(&v.to_string()).unwrap(), v.clone());
        prop_assert_eq!(tolerant_json_extract(&serde_json::to_string_pretty(&v).unwrap()).unwrap(), v);
    }
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        (-1e9f64..1e9).prop_map(Value::from),
        "\\PC{0,12}".prop_map(Value::String),
    ];
    leaf.prop_recursive(4, 32, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
            prop::collection::btree_map("\\PC{0,8}", inner, 0..6)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn json_object() -> impl Strategy<Value = Value> {
    prop::collection::btree_map("\\PC{0,8}", json_value(), 0..6)
        .prop_map(|m| Value::Object(m.into_iter().collect()))
}
