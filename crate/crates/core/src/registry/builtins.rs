//! Built-in property function implementations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, Value, ValueType};
use crate::dsl::FnSignature;

/// Displacement below which a track counts as stationary, in pixels.
pub const STATIONARY_PX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinFn {
    Center,
    Direction,
    Speed,
    Distance,
    Iou,
    Attr,
    Color,
    Plate,
    Type,
    FeatureVector,
    Similarity,
    Channel,
    Identity,
}

pub const ALL_BUILTINS: &[BuiltinFn] = &[
    BuiltinFn::Center,
    BuiltinFn::Direction,
    BuiltinFn::Speed,
    BuiltinFn::Distance,
    BuiltinFn::Iou,
    BuiltinFn::Attr,
    BuiltinFn::Color,
    BuiltinFn::Plate,
    BuiltinFn::Type,
    BuiltinFn::FeatureVector,
    BuiltinFn::Similarity,
    BuiltinFn::Channel,
    BuiltinFn::Identity,
];

/// Dependency values handed to a property function.
#[derive(Clone, Copy, Debug)]
pub enum Deps<'a> {
    /// Current-frame value of each dependency.
    Current(&'a [Value]),
    /// Oldest-first history window of each dependency.
    Window(&'a [Vec<Value>]),
}

/// Everything a property function may read.
#[derive(Clone, Copy, Debug)]
pub struct FnInput<'a> {
    pub attrs: &'a BTreeMap<String, Value>,
    pub channels: &'a BTreeMap<String, f64>,
    pub fps: f64,
    pub px_per_m: Option<f64>,
    pub args: &'a [Value],
    pub deps: Deps<'a>,
}

impl BuiltinFn {
    pub fn name(self) -> &'static str {
        match self {
            BuiltinFn::Center => "center",
            BuiltinFn::Direction => "direction",
            BuiltinFn::Speed => "speed",
            BuiltinFn::Distance => "distance",
            BuiltinFn::Iou => "iou",
            BuiltinFn::Attr => "attr",
            BuiltinFn::Color => "color",
            BuiltinFn::Plate => "plate",
            BuiltinFn::Type => "type",
            BuiltinFn::FeatureVector => "feature_vector",
            BuiltinFn::Similarity => "similarity",
            BuiltinFn::Channel => "channel",
            BuiltinFn::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<BuiltinFn> {
        ALL_BUILTINS.iter().copied().find(|b| b.name() == name)
    }

    pub fn signature(self) -> FnSignature {
        let sig = |returns, arity, needs_window| FnSignature { returns, arity, needs_window };
        match self {
            BuiltinFn::Center => sig(ValueType::List, Some(1), false),
            BuiltinFn::Direction => sig(ValueType::Str, Some(1), true),
            BuiltinFn::Speed => sig(ValueType::Num, Some(1), true),
            BuiltinFn::Distance => sig(ValueType::Num, Some(2), false),
            BuiltinFn::Iou => sig(ValueType::Num, Some(2), false),
            BuiltinFn::Attr => sig(ValueType::Any, Some(0), false),
            BuiltinFn::Color | BuiltinFn::Plate | BuiltinFn::Type => sig(ValueType::Str, Some(0), false),
            BuiltinFn::FeatureVector => sig(ValueType::List, Some(0), false),
            BuiltinFn::Similarity => sig(ValueType::Num, Some(1), false),
            BuiltinFn::Channel => sig(ValueType::Num, Some(0), false),
            BuiltinFn::Identity => sig(ValueType::Any, Some(1), false),
        }
    }

    /// Default cost units per invocation.
    pub fn default_cost(self) -> f64 {
        match self {
            BuiltinFn::Attr
            | BuiltinFn::Color
            | BuiltinFn::Plate
            | BuiltinFn::Type
            | BuiltinFn::FeatureVector
            | BuiltinFn::Similarity => 5.0,
            _ => 0.1,
        }
    }

    /// Whether the call measures in meters and so needs calibration.
    pub fn needs_calibration(self, args: &[Value]) -> bool {
        matches!(self, BuiltinFn::Speed | BuiltinFn::Distance) && unit_arg(args) == "m"
    }

    pub fn call(self, input: &FnInput) -> Value {
        match self {
            BuiltinFn::Center => current(input, 0).and_then(bbox_of).map(center_value).unwrap_or_default(),
            BuiltinFn::Direction => window(input, 0).map(direction).unwrap_or_default(),
            BuiltinFn::Speed => window(input, 0).map(|w| speed(w, input)).unwrap_or_default(),
            BuiltinFn::Distance => match (current(input, 0), current(input, 1)) {
                (Some(a), Some(b)) => distance(a, b, input),
                _ => Value::Undefined,
            },
            BuiltinFn::Iou => match (current(input, 0).and_then(bbox_of), current(input, 1).and_then(bbox_of)) {
                (Some(a), Some(b)) => Value::Num(a.iou(&b)),
                _ => Value::Undefined,
            },
            BuiltinFn::Attr => match input.args.first().and_then(Value::as_str) {
                Some(key) => input.attrs.get(key).cloned().unwrap_or_default(),
                None => Value::Undefined,
            },
            BuiltinFn::Color => input.attrs.get("color").cloned().unwrap_or_default(),
            BuiltinFn::Plate => input.attrs.get("plate").cloned().unwrap_or_default(),
            BuiltinFn::Type => input.attrs.get("type").cloned().unwrap_or_default(),
            BuiltinFn::FeatureVector => input.attrs.get("feature_vector").cloned().unwrap_or_default(),
            BuiltinFn::Similarity => similarity(input),
            BuiltinFn::Channel => match input.args.first().and_then(Value::as_str) {
                Some(key) => input.channels.get(key).map(|v| Value::Num(*v)).unwrap_or_default(),
                None => Value::Undefined,
            },
            BuiltinFn::Identity => match input.deps {
                Deps::Current(v) => v.first().cloned().unwrap_or_default(),
                Deps::Window(w) => w.first().and_then(|w| w.last()).cloned().unwrap_or_default(),
            },
        }
    }
}

fn unit_arg(args: &[Value]) -> &str {
    args.first().and_then(Value::as_str).unwrap_or("m")
}

fn current<'a>(input: &FnInput<'a>, i: usize) -> Option<&'a Value> {
    match input.deps {
        Deps::Current(v) => v.get(i).filter(|v| !v.is_undefined()),
        Deps::Window(w) => w.get(i).and_then(|w| w.last()).filter(|v| !v.is_undefined()),
    }
}

fn window<'a>(input: &FnInput<'a>, i: usize) -> Option<&'a [Value]> {
    match input.deps {
        Deps::Window(w) => w.get(i).map(Vec::as_slice).filter(|w| w.iter().all(|v| !v.is_undefined())),
        Deps::Current(_) => None,
    }
}

fn bbox_of(v: &Value) -> Option<BBox> {
    let xs = v.as_vector()?;
    (xs.len() == 4).then(|| BBox::new(xs[0], xs[1], xs[2], xs[3]))
}

fn point_of(v: &Value) -> Option<(f64, f64)> {
    let xs = v.as_vector()?;
    (xs.len() == 2).then(|| (xs[0], xs[1]))
}

fn center_value(b: BBox) -> Value {
    let (cx, cy) = b.center();
    Value::vector(&[cx, cy])
}

/// Dominant axis of the displacement between the first and last center.
/// Image y grows downwards.
pub fn direction(window: &[Value]) -> Value {
    let (Some(first), Some(last)) = (window.first().and_then(point_of), window.last().and_then(point_of)) else {
        return Value::Undefined;
    };
    let (dx, dy) = (last.0 - first.0, last.1 - first.1);
    let label = if dx.abs().max(dy.abs()) < STATIONARY_PX {
        "stationary"
    } else if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if dy > 0.0 {
        "down"
    } else {
        "up"
    };
    Value::from(label)
}

fn speed(window: &[Value], input: &FnInput) -> Value {
    if window.len() < 2 {
        return Value::Undefined;
    }
    let (Some(first), Some(last)) = (window.first().and_then(point_of), window.last().and_then(point_of)) else {
        return Value::Undefined;
    };
    let px = ((last.0 - first.0).powi(2) + (last.1 - first.1).powi(2)).sqrt();
    let px_per_s = px * input.fps / (window.len() - 1) as f64;
    match unit_arg(input.args) {
        "px" => Value::Num(px_per_s),
        _ => match input.px_per_m {
            Some(scale) => Value::Num(px_per_s / scale),
            None => Value::Undefined,
        },
    }
}

fn distance(a: &Value, b: &Value, input: &FnInput) -> Value {
    let (Some(p), Some(q)) = (point_of(a), point_of(b)) else {
        return Value::Undefined;
    };
    let px = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    match unit_arg(input.args) {
        "px" => Value::Num(px),
        _ => match input.px_per_m {
            Some(scale) => Value::Num(px / scale),
            None => Value::Undefined,
        },
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Cosine similarity against the reference vector argument, averaged over
/// the window when the property is stateful.
fn similarity(input: &FnInput) -> Value {
    let Some(reference) = input.args.first().and_then(Value::as_vector) else {
        return Value::Undefined;
    };
    let vectors: Vec<&Value> = match input.deps {
        Deps::Current(v) => v.first().into_iter().collect(),
        Deps::Window(w) => w.first().map(|w| w.iter().collect()).unwrap_or_default(),
    };
    if vectors.is_empty() {
        return Value::Undefined;
    }
    let mut total = 0.0;
    for v in &vectors {
        match v.as_vector().and_then(|x| cosine(&x, &reference)) {
            Some(c) => total += c,
            None => return Value::Undefined,
        }
    }
    Value::Num(total / vectors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(f: BuiltinFn, args: &[Value], deps: Deps, px_per_m: Option<f64>) -> Value {
        let attrs = BTreeMap::from([("color".to_string(), Value::from("red"))]);
        let channels = BTreeMap::from([("motion_score".to_string(), 3.0)]);
        f.call(&FnInput { attrs: &attrs, channels: &channels, fps: 10.0, px_per_m, args, deps })
    }

    fn centers(points: &[(f64, f64)]) -> Vec<Value> {
        points.iter().map(|(x, y)| Value::vector(&[*x, *y])).collect()
    }

    #[test]
    fn center_is_midpoint() {
        let v = call(BuiltinFn::Center, &[], Deps::Current(&[Value::vector(&[10.0, 10.0, 20.0, 20.0])]), None);
        assert_eq!(v, Value::vector(&[15.0, 15.0]));
    }

    #[test]
    fn direction_by_dominant_axis() {
        let right = [centers(&[(0.0, 0.0), (2.0, 0.5), (4.0, 0.0), (6.0, 1.0), (8.0, 0.0)])];
        assert_eq!(call(BuiltinFn::Direction, &[], Deps::Window(&right), None), Value::from("right"));
        let up = [centers(&[(5.0, 10.0), (5.0, 4.0)])];
        assert_eq!(call(BuiltinFn::Direction, &[], Deps::Window(&up), None), Value::from("up"));
        let still = [centers(&[(5.0, 10.0), (5.5, 10.5)])];
        assert_eq!(call(BuiltinFn::Direction, &[], Deps::Window(&still), None), Value::from("stationary"));
        let partial = [vec![Value::Undefined, Value::vector(&[1.0, 1.0])]];
        assert!(call(BuiltinFn::Direction, &[], Deps::Window(&partial), None).is_undefined());
    }

    #[test]
    fn distance_three_four_five() {
        let deps = [Value::vector(&[0.0, 0.0]), Value::vector(&[30.0, 40.0])];
        assert_eq!(call(BuiltinFn::Distance, &[], Deps::Current(&deps), Some(10.0)), Value::Num(5.0));
        assert_eq!(call(BuiltinFn::Distance, &["px".into()], Deps::Current(&deps), None), Value::Num(50.0));
        assert!(call(BuiltinFn::Distance, &[], Deps::Current(&deps), None).is_undefined());
    }

    #[test]
    fn speed_over_window_intervals() {
        // 4 px per frame over 5 samples at 10 fps and 2 px/m: 4 * 10 / 2 = 20 m/s.
        let w = [centers(&[(0.0, 0.0), (4.0, 0.0), (8.0, 0.0), (12.0, 0.0), (16.0, 0.0)])];
        assert_eq!(call(BuiltinFn::Speed, &[], Deps::Window(&w), Some(2.0)), Value::Num(20.0));
    }

    #[test]
    fn attribute_lookup() {
        assert_eq!(call(BuiltinFn::Attr, &["color".into()], Deps::Current(&[]), None), Value::from("red"));
        assert_eq!(call(BuiltinFn::Color, &[], Deps::Current(&[]), None), Value::from("red"));
        assert!(call(BuiltinFn::Plate, &[], Deps::Current(&[]), None).is_undefined());
        assert_eq!(call(BuiltinFn::Channel, &["motion_score".into()], Deps::Current(&[]), None), Value::Num(3.0));
    }

    #[test]
    fn similarity_of_identical_vectors_is_one() {
        let v = Value::vector(&[0.2, 0.4, 0.1]);
        let s = call(BuiltinFn::Similarity, std::slice::from_ref(&v), Deps::Current(std::slice::from_ref(&v)), None);
        assert!((s.as_f64().unwrap() - 1.0).abs() < 1e-12);
        let w = [vec![v.clone(), Value::vector(&[-0.2, -0.4, -0.1])]];
        let s = call(BuiltinFn::Similarity, &[v], Deps::Window(&w), None);
        assert!(s.as_f64().unwrap().abs() < 1e-12);
    }

    #[test]
    fn undefined_inputs_propagate() {
        assert!(call(BuiltinFn::Center, &[], Deps::Current(&[Value::Undefined]), None).is_undefined());
        assert!(call(BuiltinFn::Iou, &[], Deps::Current(&[Value::Undefined, Value::Undefined]), None).is_undefined());
    }
}
