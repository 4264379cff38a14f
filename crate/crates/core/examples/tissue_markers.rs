//! Linear tissue view: marked agents shift when someone at or left of them
//! divides, and a Yule clock turns division counts into time.

use polya_urn::rng::{stream, Role};
use polya_urn::urn::{UrnState, YuleClock};

pub fn run_example() -> polya_urn::Result<Vec<u64>> {
    let state = UrnState::new(vec![3, 4, 3])?;
    let mut markers = state.markers();
    let mut rng = stream(9, Role::Urn, 0);
    let divisions = 1_000;
    for _ in 0..divisions {
        markers.divide_uniform(&mut rng);
    }
    println!(
        "markers after {divisions} divisions: {:?} of {}",
        markers.m, markers.sentinel_right
    );
    println!("implied color counts: {:?}", markers.counts());

    let clock = YuleClock::new(1.0, state.total())?;
    let mut rng = stream(9, Role::Clock, 0);
    let times = clock.division_times(divisions, &mut rng);
    println!(
        "time of division {divisions}: {:.3} (expected {:.3})",
        times[divisions - 1],
        clock.expected_time(divisions)
    );
    Ok(markers.counts())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
