mod common;

use common::{goal_world, sharp_theta};
use rsg_core::dependency::{compute_thresholds, discover, plan_to_goal, DependencyMatrix, GoalMode, GoalSearchConfig};
use rsg_core::eval::{build_dataset, goal_search_runs, nodes_for_success_rate, training_tasks};
use rsg_core::model::Theta;
use rsg_core::tl::SubgoalName;
use rsg_core::world::WorldSpec;

fn discovered() -> (Theta, DependencyMatrix) {
    let data = build_dataset(&WorldSpec::standard(), &training_tasks(), 10, 21, 0.05).unwrap();
    let theta = sharp_theta(&data[0].world, 12.0);
    let deps = discover(&data, &theta, &compute_thresholds(&data, &theta));
    (theta, deps)
}

#[test]
fn discovered_chain_leads_to_the_boat() {
    let (_, d) = discovered();
    let ix = |s: &str| d.index_of(&s.parse().unwrap()).unwrap();
    for (g, p) in [("mine-wood", "grab-axe"), ("craft-wood-plank", "mine-wood"), ("craft-boat", "craft-wood-plank")] {
        assert!(d.get(ix(g), ix(p)) > 0.5, "d({g}, {p}) = {}", d.get(ix(g), ix(p)));
    }
}

#[test]
fn guided_search_needs_at_most_half_the_nodes_of_blind_search() {
    let (theta, deps) = discovered();
    let uniform = DependencyMatrix::uniform(theta.subgoals().to_vec());
    let world = goal_world();
    let seeds: Vec<u64> = (5000..5100).collect();
    let blind = GoalSearchConfig {
        mode: GoalMode::Blind,
        ..GoalSearchConfig::default()
    };
    for goal in ["craft-stick", "craft-boat"] {
        let goal: SubgoalName = goal.parse().unwrap();
        let p70 = |d: &DependencyMatrix, c: &GoalSearchConfig| {
            nodes_for_success_rate(&goal_search_runs(&world, &theta, d, &goal, &seeds, c), 0.7)
        };
        let guided = p70(&deps, &GoalSearchConfig::default()).expect("guided search reaches 70%");
        if let Some(b) = p70(&deps, &blind) {
            assert!(guided as f64 <= 0.5 * b as f64, "{goal}: guided {guided} blind {b}");
        }
        if let Some(u) = p70(&uniform, &GoalSearchConfig::default()) {
            assert!(u as f64 > 1.25 * guided as f64, "{goal}: guided {guided} uniform {u}");
        }
    }
}

#[test]
fn plans_end_where_the_goal_holds() {
    let (theta, deps) = discovered();
    let spec = goal_world();
    let goal: SubgoalName = "craft-wood-plank".parse().unwrap();
    for seed in 0..10 {
        let sc = spec.sample(seed, None).unwrap();
        let o = sc.world.subgoal_index(&goal).unwrap();
        if let Ok(p) = plan_to_goal(&goal, &sc.world, &theta, &deps, sc.start, &GoalSearchConfig::default()) {
            assert!(sc.world.goal_holds(o, &p.plan.states.last().unwrap().s), "seed {seed}");
            assert!(p.expanded <= GoalSearchConfig::default().node_cap + 1);
        }
    }
}
