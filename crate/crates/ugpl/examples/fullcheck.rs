fn main() {
    let t0 = std::time::Instant::now();
    let reports = ugpl::verify::gradcheck_suite(1e-5, 1e-4, 4).unwrap();
    for r in &reports {
        println!("{}", r.summary());
    }
    println!("elapsed: {:.1}s, all_pass={}", t0.elapsed().as_secs_f64(), ugpl::verify::all_pass(&reports));
}
