//! Weight-deviation objective and CSV ingestion.

use noiseopt::domain::{ingest_reader, objective_delta_w, ParameterBounds};

const CSV: &str = "\
device_id,flow,layer_height,repetition_mode,replicate_index,measured_weight,expected_weight,iteration,timestamp
0,3000,0.4,simultaneous,0,19.8,20,0,
0,3000,0.4,simultaneous,1,20.1,20,0,
1,2500,0.3,sequential,0,21.0,20,0,
1,2500,0.3,sequential,1,20.6,20,0,
";

fn main() -> noiseopt::Result<()> {
    for w in [18.0, 20.0, 21.5] {
        println!("measured {w:>5} g of 20 g -> dW = {:+.4}", objective_delta_w(w, 20.0)?);
    }

    let ds = ingest_reader(CSV.as_bytes(), 2, ParameterBounds::default())?;
    for d in 0..ds.fleet_size {
        let ws = ds.device_weights(d);
        println!("{}: {} records, weights {:?}", ds.device_name(d), ws.len(), ws);
    }
    for r in &ds.records {
        println!("device {} at {:?}: dW = {:+.4}", r.device_id, r.point, r.delta_w());
    }

    // Out-of-box points are rejected.
    let bad = CSV.replace("2500,0.3", "9000,0.3");
    match ingest_reader(bad.as_bytes(), 2, ParameterBounds::default()) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
