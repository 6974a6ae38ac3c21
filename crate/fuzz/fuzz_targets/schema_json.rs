#![no_main]

use libfuzzer_sys::fuzz_target;
use tabforge::table::TableSchema;

fuzz_target!(|data: &str| {
    if let Ok(schema) = TableSchema::from_json_str(data) {
        let again = TableSchema::from_json_str(&schema.to_json()).expect("serialized schema parses");
        assert_eq!(again, schema);
    }
});
