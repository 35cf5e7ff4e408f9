//! Rewrites the committed benchmark datasets from their recorded seeds.
//!
//! `cargo run -p priorsens --example regenerate_data`

use std::path::Path;

use priorsens::benchmarks::{linear, ode::OdeTolerances, seir};
use priorsens::io::{Cell, Table};

fn main() -> priorsens::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");

    let mut t = Table::new(vec!["t".into(), "value".into()])
        .meta("seed", linear::SHIPPED_DATA_SEED)
        .meta("noise_std", 1);
    for (time, v) in linear::TIMES.iter().zip(linear::simulate_linear_data(linear::SHIPPED_DATA_SEED, 1.0)) {
        t.push(vec![Cell::Num(*time), Cell::Num(v)]);
    }
    t.write(&dir.join("linear_data.csv"))?;

    let mut t = Table::new(vec!["t".into(), "value".into()])
        .meta("seed", seir::SHIPPED_DATA_SEED)
        .meta("noise_std", seir::NOISE_STD);
    for (time, v) in seir::simulate_seir_data(seir::SHIPPED_DATA_SEED, seir::NOISE_STD, OdeTolerances::default())? {
        t.push(vec![Cell::Num(time), Cell::Num(v)]);
    }
    t.write(&dir.join("seir_data.csv"))?;
    Ok(())
}
