mod common;

use common::{expected_shape, GOLDEN_SHAPES};
use rsg_core::fsm::compile;
use rsg_core::tl::TaskAst;

#[test]
fn and_copies_every_child_per_done_set() {
    for (text, labeled) in [("a and b", 4), ("a and b and c", 12)] {
        let fsm = compile(&text.parse().unwrap());
        assert_eq!(fsm.labeled_count(), labeled, "{text}");
        // n * 2^(n-1)
        let n = text.split(" and ").count();
        assert_eq!(labeled, n << (n - 1));
    }
}

#[test]
fn golden_then_or_shapes() {
    for (text, nodes, edges) in GOLDEN_SHAPES {
        let task: TaskAst = text.parse().unwrap();
        assert_eq!(expected_shape(&task), (nodes, edges), "hand count for `{text}`");
        let fsm = compile(&task);
        assert_eq!((fsm.node_count(), fsm.edges().len()), (nodes, edges), "{text}");
    }
}
