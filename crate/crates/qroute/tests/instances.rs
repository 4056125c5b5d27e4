use std::path::Path;

use qroute::instances::{parse_instance, render_instance};
use qroute::Error;
use qroute_core::env::{generate_instance, GeneratorSpec};
use qroute_core::rng::stream;

fn parse(text: &str) -> qroute::Result<qroute_core::env::Instance> {
    parse_instance(text, Path::new("test.csv"))
}

fn error_line(text: &str) -> u64 {
    match parse(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn three_rows_give_three_nodes() {
    let inst = parse("# capacity=1\nid,x,y,demand\n0,0.5,0.5,\n1,0,1,0.3\n2,1,0,1.7\n").unwrap();
    assert_eq!(inst.n(), 3);
    assert_eq!(inst.depot(), [0.5, 0.5]);
    assert_eq!(inst.demands(), &[0.3, 1.7]);
}

#[test]
fn demands_are_divided_by_capacity() {
    let inst = parse("# capacity=30\nid,x,y,demand\n0,0,0,\n1,1,1,15\n").unwrap();
    assert_eq!(inst.demands(), &[0.5]);
}

#[test]
fn capacity_defaults_to_one_and_rows_may_come_in_any_order() {
    let inst = parse("id,x,y,demand\n2,3,3,2\n0,0,0,\n1,1,1,1\n").unwrap();
    assert_eq!(inst.suppliers(), &[[1.0, 1.0], [3.0, 3.0]]);
    assert_eq!(inst.demands(), &[1.0, 2.0]);
}

#[test]
fn errors_carry_line_numbers() {
    assert_eq!(error_line("# capacity=1\nid,x,y,demand\n0,0,0,\n1,1,1,0\n"), 4);
    assert_eq!(error_line("id,x,y,demand\n0,0,0,\n1,1,1,-2\n"), 3);
    assert_eq!(error_line("id,x,y,demand\n0,0,0,\n1,1,one,2\n"), 3);
    assert_eq!(error_line("id,x,y,demand\n0,0,0,\n1,1,1\n"), 3);
    assert_eq!(error_line("id,x,y,demand\n0,0,0,\n1,1,1,2\n1,2,2,2\n"), 4);
    assert_eq!(error_line("id,x,y\n0,0,0\n"), 1);
    assert_eq!(error_line("# capacity=0\nid,x,y,demand\n0,0,0,\n"), 1);
    assert_eq!(error_line("id,x,y,demand\n0,0,0,1\n"), 2);
    assert!(matches!(parse("id,x,y,demand\n1,0,0,1\n"), Err(Error::Parse { .. })));
}

#[test]
fn rendering_round_trips() {
    let spec = GeneratorSpec::default();
    for seed in 0..20 {
        let inst = generate_instance(&spec, &mut stream(seed, &[])).unwrap();
        assert_eq!(parse(&render_instance(&inst)).unwrap(), inst);
    }
}
