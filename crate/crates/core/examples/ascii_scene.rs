//! Prints a synthesized scene as ASCII: `#` plan walls, `o` furniture.
//! Usage: `cargo run --example ascii_scene -- [seed] [small|medium|large]`

use floornav::floorgrid::{synth_scene, Cell, SceneParams, SizeClass};
use floornav::geometry::PixelCoord;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let class: SizeClass = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(SizeClass::Medium);
    let s = synth_scene(seed, class, 0.15, &SceneParams::default()).unwrap();
    for row in (0..s.truth_map.height()).rev().step_by(2) {
        let line: String = (0..s.truth_map.width())
            .map(|c| {
                let u = PixelCoord::new(c, row);
                match (s.floor_plan.get(u).unwrap(), s.truth_map.get(u).unwrap()) {
                    (Cell::Occupied, _) => '#',
                    (_, Cell::Occupied) => 'o',
                    _ => '.',
                }
            })
            .collect();
        println!("{line}");
    }
}
