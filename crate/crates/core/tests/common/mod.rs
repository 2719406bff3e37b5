//! Worlds, programs and helpers shared by the integration suites.
#![allow(dead_code)]

use vidq::dsl::{compile, ValidatedProgram};
use vidq::executor::{run, ExecOptions, RunOutput};
use vidq::planner::{general_plan, PlanDag, PlanOptions};
use vidq::registry::Registry;
use vidq::synth::{generate, ObjectSpec, World, WorldSpec};

pub const CARS: &str = r#"
vobj Car {
    detector = "yolox";
    @stateless(deps = [bbox]) property center = center;
    @stateful(deps = [center], window = 5) property direction = direction;
    @stateless(intrinsic) property color = color;
}
"#;

pub fn program(src: &str, registry: &Registry) -> ValidatedProgram {
    compile(src, registry).unwrap_or_else(|e| panic!("program does not compile:\n{e}"))
}

pub fn plan_for(src: &str, query: &str, registry: &Registry, options: &PlanOptions, fps: f64) -> PlanDag {
    general_plan(&program(src, registry), registry, query, fps, options).unwrap()
}

pub fn execute(plan: &PlanDag, registry: &Registry, world: &World, options: &ExecOptions) -> RunOutput {
    run(plan, registry, &world.meta, &world.trace, options).unwrap()
}

pub fn exec_options(memo: bool, lazy: bool) -> ExecOptions {
    ExecOptions { memo, lazy, ..ExecOptions::default() }
}

pub fn plan_options(memo: bool) -> PlanOptions {
    PlanOptions { memo, ..PlanOptions::default() }
}

/// `n` stationary, non-overlapping cars alive for `life` frames each, one
/// after another; every car's color comes from `colors`.
pub fn relay_world(n: usize, life: u64, colors: &[&str]) -> WorldSpec {
    let mut w = WorldSpec::new(n as u64 * life, 1280, 720, 11);
    for i in 0..n {
        let x = 40.0 + (i % 20) as f64 * 60.0;
        let y = 60.0 + (i / 20) as f64 * 60.0;
        let entry = i as u64 * life;
        w.objects.push(
            ObjectSpec::linear("car", (x, y), (0.0, 0.0), entry, Some(entry + life))
                .with_attr("color", colors[i % colors.len()]),
        );
    }
    w
}

/// `n` cars present on every frame of a `frames`-frame world, each moving
/// right (even index) or down (odd index), with `red` of them red.
pub fn crowd_world(n: usize, red: usize, frames: u64) -> WorldSpec {
    let mut w = WorldSpec::new(frames, 1920, 1080, 5);
    for i in 0..n {
        let x = 30.0 + (i % 20) as f64 * 90.0;
        let y = 30.0 + (i / 20) as f64 * 200.0;
        let v = if i % 2 == 0 { (2.0, 0.0) } else { (0.0, 2.0) };
        let color = if i < red { "red" } else { "blue" };
        w.objects.push(ObjectSpec::linear("car", (x, y), v, 0, None).with_attr("color", color));
    }
    w
}

pub fn world(spec: &WorldSpec) -> World {
    generate(spec).unwrap()
}
