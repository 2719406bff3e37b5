use std::path::Path;
use std::process::{Command, Output};

use vidq::synth::{generate, ObjectSpec, WorldSpec};

const PROGRAM: &str = r#"
vobj Person { detector = "person_detector"; @stateless(deps = [bbox]) property center = center; }
vobj Car {
    detector = "car_detector";
    @stateless(deps = [bbox]) property center = center;
    @stateless(intrinsic) property color = color;
}
vobj RedCar extends Car { detector = "red_car_detector"; constraint = color == "red"; }
relation Enters(p: Person, c: Car) { @stateless(deps = [p.center, c.center]) property distance = distance("px"); }
query Suspect {
    vobj p: Person;
    vobj c: RedCar;
    relation e = Enters(p, c);
    frame_constraint = e.distance < 80;
    frame_output = [e.distance];
}
"#;

const MANIFEST: &str = r#"{
  "detectors": [
    {"name": "red_car_detector", "classes": ["car"], "require": {"color": "red"}, "cost": 20,
     "error_profile": {"miss_rate": 0.05, "seed": 3}}
  ]
}"#;

fn setup(dir: &Path) {
    let mut w = WorldSpec::new(60, 640, 480, 9);
    w.objects.push(ObjectSpec::linear("person", (40.0, 200.0), (4.0, 0.0), 0, None));
    w.objects.push(ObjectSpec::linear("car", (150.0, 230.0), (0.0, 1.0), 5, Some(40)).with_attr("color", "red"));
    w.objects.push(ObjectSpec::linear("car", (400.0, 100.0), (-1.0, 0.0), 0, None).with_attr("color", "blue"));
    generate(&w).unwrap().save(dir).unwrap();
    std::fs::write(dir.join("q.vq"), PROGRAM).unwrap();
    std::fs::write(dir.join("registry.json"), MANIFEST).unwrap();
}

fn vidq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidq")).current_dir(dir).args(args).output().unwrap()
}

const INPUTS: [&str; 8] =
    ["--program", "q.vq", "--registry", "registry.json", "--trace", "trace.jsonl", "--meta", "meta.json"];

fn with_inputs<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![cmd];
    args.extend(INPUTS);
    args.extend(extra);
    args
}

#[test]
fn run_writes_results_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = vidq(dir.path(), &with_inputs("run", &["--out", "r.jsonl"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    assert!(text.lines().count() > 5);
    assert!(text.lines().all(|l| l.contains("\"query\":\"Suspect\"") && l.contains("distance")));
    let stdout = vidq(dir.path(), &with_inputs("run", &[]));
    assert_eq!(String::from_utf8(stdout.stdout).unwrap(), text);
}

#[test]
fn syntax_error_exits_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    std::fs::write(dir.path().join("bad.vq"), "vobj Car {\n  detector = ;\n}\n").unwrap();
    let out = vidq(dir.path(), &["validate", "--program", "bad.vq"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.vq:2:14:"), "{err}");
}

#[test]
fn missing_trace_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    std::fs::remove_file(dir.path().join("trace.jsonl")).unwrap();
    let out = vidq(dir.path(), &with_inputs("run", &[]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn planning_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = vidq(dir.path(), &with_inputs("run", &["--query", "Nope"]));
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("q.vq"), "vobj Car { detector = \"car_detector\"; }\n").unwrap();
    let out = vidq(dir.path(), &with_inputs("explain", &[]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no queries"));
}

#[test]
fn explain_prints_the_join_plan() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = vidq(dir.path(), &with_inputs("explain", &[]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dot = String::from_utf8(out.stdout).unwrap();
    assert!(dot.starts_with("digraph \"Suspect\""));
    assert_eq!(dot.matches("ObjectDetector(").count(), 2);
    assert_eq!(dot.matches("Join(").count(), 1);
    let all = String::from_utf8(vidq(dir.path(), &with_inputs("explain", &["--all"])).stdout).unwrap();
    assert_eq!(all.matches("digraph").count(), 2);
    assert!(all.contains("red_car_detector") && all.contains("car_detector"));
}

#[test]
fn profile_marks_the_selected_plan() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = vidq(dir.path(), &with_inputs("profile", &[]));
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with('*')).count(), 1, "{table}");
    assert_eq!(table.lines().count(), 4, "{table}");
}

#[test]
fn plan_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let args = with_inputs("run", &["--plan-cache", "plans", "--out", "a.jsonl"]);
    assert_eq!(vidq(dir.path(), &args).status.code(), Some(0));
    let cached: Vec<_> = std::fs::read_dir(dir.path().join("plans")).unwrap().collect();
    assert_eq!(cached.len(), 1);
    let args = with_inputs("run", &["--plan-cache", "plans", "--out", "b.jsonl"]);
    assert_eq!(vidq(dir.path(), &args).status.code(), Some(0));
    assert_eq!(std::fs::read_dir(dir.path().join("plans")).unwrap().count(), 1);
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
}

#[test]
fn synth_writes_a_world_or_streams_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{"frames": 12, "width": 320, "height": 240, "seed": 1,
        "objects": [{"class": "car", "size": [10, 10], "start": [50, 50],
                     "trajectory": {"kind": "linear", "velocity": [1, 0]}, "entry": 0}]}"#;
    std::fs::write(dir.path().join("world.json"), spec).unwrap();
    let out = vidq(dir.path(), &["synth", "world.json", "--out", "w"]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["trace.jsonl", "meta.json", "truth.jsonl", "identities.json"] {
        assert!(dir.path().join("w").join(f).exists(), "{f}");
    }
    let out = vidq(dir.path(), &["synth", "world.json"]);
    let streamed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(streamed, std::fs::read_to_string(dir.path().join("w/trace.jsonl")).unwrap());
    std::fs::write(dir.path().join("bad.json"), spec.replace("[1, 0]", "[40, 0]")).unwrap();
    assert_eq!(vidq(dir.path(), &["synth", "bad.json"]).status.code(), Some(1));
}
