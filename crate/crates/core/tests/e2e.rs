mod common;

use common::*;
use proptest::prelude::*;
use vidq::executor::ExecOptions;
use vidq::planner::PlanOptions;
use vidq::registry::Registry;
use vidq::synth::{label, LabelQuery, ObjectPredicate, ObjectSpec, WorldSpec};

#[test]
fn intrinsic_color_is_computed_once_per_track() {
    let reg = Registry::with_builtins();
    let src = format!("{CARS} query Red {{ vobj c: Car; frame_constraint = c.color == \"red\"; }}");
    let w = world(&relay_world(10, 30, &["red", "blue"]));
    let memo = execute(&plan_for(&src, "Red", &reg, &plan_options(true), 30.0), &reg, &w, &exec_options(true, true));
    let plain = execute(&plan_for(&src, "Red", &reg, &plan_options(false), 30.0), &reg, &w, &exec_options(false, true));
    assert_eq!(memo.stats.function("color"), 10);
    assert_eq!(plain.stats.function("color"), 300);
    assert_eq!(memo.canonical(), plain.canonical());
    assert_eq!(memo.results["Red"].frames.len(), 150);
}

#[test]
fn lazy_evaluation_skips_direction_of_non_red_cars() {
    let reg = Registry::with_builtins();
    let src = format!(
        "{CARS} query RedRight {{ vobj c: Car; frame_constraint = c.color == \"red\" && c.direction == \"right\"; }}"
    );
    let w = world(&crowd_world(100, 10, 5));
    let plan = plan_for(&src, "RedRight", &reg, &plan_options(true), 30.0);
    let lazy = execute(&plan, &reg, &w, &exec_options(true, true));
    let eager = execute(&plan, &reg, &w, &exec_options(true, false));
    assert_eq!(lazy.stats.function("direction"), 10);
    assert_eq!(eager.stats.function("direction"), 100);
    assert_eq!(lazy.canonical(), eager.canonical());
    assert!(!lazy.canonical().is_empty());
}


const PEOPLE_AND_CARS: &str = r#"
vobj Person { detector = "yolox"; @stateless(deps = [bbox]) property center = center; }
vobj Car {
    detector = "yolox";
    @stateless(deps = [bbox]) property center = center;
    @stateful(deps = [center], window = 5) property speed = speed("px");
    @stateless(intrinsic) property color = color;
}
relation Near(p: Person, c: Car) { @stateless(deps = [p.center, c.center]) property distance = distance("px"); }
query People { vobj p: Person; frame_constraint = p.class == "person"; }
query RedCars { vobj c: Car; frame_constraint = c.class == "car" && c.color == "red"; }
query BlueCars { vobj c: Car; frame_constraint = c.class == "car" && c.color == "blue"; }
query Fast { vobj c: Car; frame_constraint = c.class == "car" && c.speed > 60; }
spatial query Meet { left = People; right = RedCars; relation n = Near; frame_constraint = n.distance < 100; }
temporal query RedThenBlue { first = RedCars; then = BlueCars; within = 30; }
"#;

fn street() -> WorldSpec {
    let mut w = WorldSpec::new(90, 640, 480, 21);
    w.objects.push(ObjectSpec::linear("person", (40.0, 200.0), (4.0, 0.0), 0, Some(80)));
    w.objects.push(ObjectSpec::linear("car", (150.0, 230.0), (0.0, 1.0), 10, Some(21)).with_attr("color", "red"));
    w.objects.push(ObjectSpec::linear("car", (500.0, 100.0), (-3.0, 0.0), 35, Some(60)).with_attr("color", "blue"));
    w.objects.push(ObjectSpec::linear("car", (100.0, 420.0), (1.0, 0.0), 0, None).with_attr("color", "red"));
    w
}

fn positives(out: &vidq::executor::RunOutput, q: &str) -> Vec<u64> {
    out.results[q].frames.keys().copied().collect()
}

#[test]
fn spatial_query_matches_distance_labels() {
    let reg = Registry::with_builtins();
    let spec = street();
    let w = world(&spec);
    let out = execute(&plan_for(PEOPLE_AND_CARS, "Meet", &reg, &PlanOptions::default(), 30.0), &reg, &w, &ExecOptions::default());
    let red_car = ObjectPredicate::class("car").with_attr("color", "red");
    let truth = label(&spec, &LabelQuery::Near { a: ObjectPredicate::class("person"), b: red_car, max_px: 100.0 }).unwrap();
    assert!(truth.positives().count() > 5);
    assert_eq!(positives(&out, "Meet"), truth.positives().collect::<Vec<_>>());
}

#[test]
fn speed_filter_matches_kinematic_labels() {
    let reg = Registry::with_builtins();
    let spec = street();
    let w = world(&spec);
    let out = execute(&plan_for(PEOPLE_AND_CARS, "Fast", &reg, &PlanOptions::default(), 30.0), &reg, &w, &ExecOptions::default());
    let mut fast = ObjectPredicate::class("car");
    fast.min_speed = Some(60.0);
    let truth = label(&spec, &LabelQuery::Object(fast)).unwrap();
    assert_eq!(positives(&out, "Fast"), truth.positives().collect::<Vec<_>>());
    assert_eq!(positives(&out, "Fast"), (39..60).collect::<Vec<_>>());
}

#[test]
fn temporal_query_reports_the_gap_between_runs() {
    let reg = Registry::with_builtins();
    let mut spec = street();
    spec.objects.pop();
    let w = world(&spec);
    let plan = plan_for(PEOPLE_AND_CARS, "RedThenBlue", &reg, &PlanOptions::default(), 30.0);
    let out = execute(&plan, &reg, &w, &ExecOptions::default());
    let video = out.results["RedThenBlue"].video.clone().expect("video line");
    assert_eq!(video["holds"], true);
    assert_eq!(video["witnesses"], serde_json::json!([[20, 35]]));
    assert_eq!(positives(&out, "RedThenBlue"), vec![35]);

    let mut late = spec.clone();
    late.objects[2].entry = 60;
    late.objects[2].exit = Some(80);
    late.objects[2].start = (560.0, 100.0);
    let out = execute(&plan, &reg, &world(&late), &ExecOptions::default());
    assert_eq!(out.results["RedThenBlue"].video.as_ref().unwrap()["holds"], false);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn batch_size_does_not_change_results(batch in 1usize..40, seed in 0u64..1000) {
        let reg = Registry::with_builtins();
        let mut spec = street();
        spec.seed = seed;
        spec.noise.miss_rate = 0.1;
        spec.noise.jitter = 1.0;
        let w = world(&spec);
        for q in ["Meet", "Fast", "RedThenBlue"] {
            let plan = plan_for(PEOPLE_AND_CARS, q, &reg, &PlanOptions::default(), 30.0);
            let base = execute(&plan, &reg, &w, &ExecOptions::default());
            let other = execute(&plan, &reg, &w, &ExecOptions { batch_size: batch, ..ExecOptions::default() });
            prop_assert_eq!(base.canonical(), other.canonical());
        }
    }
}
