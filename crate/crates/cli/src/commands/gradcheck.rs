use vidsal::gradcheck::{run_suite, GradCheckOptions, Suite};

use crate::args::{GradcheckArgs, ModuleArg};
use crate::failure::Failure;

pub fn run(a: GradcheckArgs) -> Result<(), Failure> {
    let suite = match a.module {
        ModuleArg::Tensor => Suite::Tensor,
        ModuleArg::Recurrence => Suite::Recurrence,
        ModuleArg::Model => Suite::Model,
        ModuleArg::Loss => Suite::Loss,
        ModuleArg::All => Suite::All,
    };
    let opts = GradCheckOptions {
        corrupt: a.inject_fault.then_some(1.01),
        ..GradCheckOptions::default()
    };
    let reports = run_suite(suite, a.seed, &opts)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!(
        "{}/{} operations passed, max_rel_err={worst:.3e}, tolerance={:.0e}",
        reports.len() - failed,
        reports.len(),
        opts.tolerance
    );
    if failed > 0 {
        return Err(Failure::check(format!("{failed} operation(s) failed the gradient check")));
    }
    Ok(())
}
