//! Warm standby pool sizes for a range of job sizes.

use robustsim::recovery::{binomial_pmf, size_pool};

fn main() {
    let p = 1e-3;
    println!("{:>8} {:>6} {:>6}", "machines", "q=.99", "q=.999");
    for n in [16, 128, 1024, 4096, 16384] {
        println!("{n:>8} {:>6} {:>6}", size_pool(n, p, 0.99), size_pool(n, p, 0.999));
    }

    let pmf = binomial_pmf(1024, p);
    let covered: f64 = pmf[..=size_pool(1024, p, 0.99) as usize].iter().sum();
    println!("1024 machines: pool covers {:.4} of daily failure counts", covered);
}
