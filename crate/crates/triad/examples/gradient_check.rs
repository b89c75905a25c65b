//! Verify every trainable component's analytic gradients against central
//! finite differences at f64.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use triad::trainer::gradcheck::{composite_linearity_deviation, grad_check};

fn main() -> triad::Result<()> {
    for report in grad_check(None, 1e-5, 1e-4, 12345)? {
        report.print();
    }
    let dev = composite_linearity_deviation(3);
    println!("composite-objective gradient linearity deviation: {dev:.2e}");
    Ok(())
}
