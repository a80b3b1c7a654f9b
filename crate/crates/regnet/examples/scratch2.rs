use regnet::convexsolve::*;
fn main() {
    let mut p = ConvexProgram::new(1);
    p.add_linear(0, 1.0);
    p.add_ineq(&[(0, 1.0)], 0.0);
    match p.solve() {
        Ok(s) => println!("{:?} obj {}", s.status, s.objective_value),
        Err(e) => println!("ERR {e}"),
    }
}
