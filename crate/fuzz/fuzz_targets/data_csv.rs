#![no_main]

//! Input layout: the sidecar JSON on the first line, the CSV table after it.

use ddmpc::hankel::{DataRecord, DataSidecar};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == b'\n') else { return };
    let Ok(sidecar) = serde_json::from_slice::<DataSidecar>(&data[..split]) else { return };
    let Ok(record) = DataRecord::read_csv(&data[split + 1..], &sidecar) else { return };
    let mut out = Vec::new();
    record.write_csv(&mut out).expect("write to memory");
    let again = DataRecord::read_csv(out.as_slice(), &record.sidecar()).expect("own output parses");
    assert_eq!(again.u_record(), record.u_record());
});
