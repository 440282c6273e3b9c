//! Prints the positional code tables for a few layouts: their width, the
//! closest pair of slots and the radius inside which matching is exact.
//!
//! cargo run --example positional_codes

use jpdvt::assignment::noise_tolerance_radius;
use jpdvt::posenc::{Layout, PeTable};

fn main() -> jpdvt::Result<()> {
    let layouts = [
        Layout::square(2),
        Layout::square(3),
        Layout::square(5),
        Layout::Sequence { len: 8 },
        Layout::Sequence { len: 32 },
    ];
    println!("{:<24} {:>6} {:>5} {:>10} {:>10}", "layout", "slots", "dim", "min gap", "radius");
    for layout in layouts {
        let table = PeTable::new(&layout)?;
        let rows = table.rows();
        let mut gap = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                gap = gap.min(d.sqrt());
            }
        }
        println!(
            "{:<24} {:>6} {:>5} {:>10.4} {:>10.4}",
            format!("{layout:?}"),
            table.len(),
            table.dim(),
            gap,
            noise_tolerance_radius(&table)
        );
    }
    let table = PeTable::new(&Layout::square(2))?;
    for (slot, row) in table.rows().iter().enumerate() {
        let head: Vec<String> = row.iter().take(6).map(|v| format!("{v:+.3}")).collect();
        println!("2x2 slot {slot}: [{} ...]", head.join(", "));
    }
    Ok(())
}
