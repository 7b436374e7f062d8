use std::ffi::{CStr, CString};
use std::ptr;

use fedgkd_ffi::*;

const SMALL_RUN: &str = r#"
strategy = "fedgkd"
dataset = { kind = "toy", train_size = 240, test_size = 120 }
seed = 11

[federation]
num_clients = 4
participation = 0.5
rounds = 3
local_epochs = 1
batch_size = 16
buffer_size = 2

[partition]
alpha = 0.5

[model]
layer_widths = [2, 8, 4]
"#;

fn last_error() -> String {
    let p = fgkd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_sim(text: &str) -> *mut FgkdSimulation {
    let cfg = CString::new(text).unwrap();
    let mut sim = ptr::null_mut();
    let status = unsafe { fgkd_simulation_new(cfg.as_ptr(), ptr::null(), &mut sim) };
    assert_eq!(status, FgkdStatus::Ok, "{}", last_error());
    sim
}

#[test]
fn simulation_lifecycle_and_checkpoint_round_trip() {
    let sim = new_sim(SMALL_RUN);
    unsafe {
        assert_eq!(fgkd_simulation_round(sim), 0);
        assert!(fgkd_simulation_last_record_json(sim).is_null());
        let mut summary = FgkdRoundSummary::default();
        for r in 1..=3 {
            assert_eq!(fgkd_simulation_run_round(sim, &mut summary), FgkdStatus::Ok);
            assert_eq!(summary.round, r);
            assert_eq!(summary.num_sampled, 2);
            assert_eq!(summary.payload_multiplier, 2);
            assert!((0.0..=1.0).contains(&summary.test_accuracy));
        }
        let json = fgkd_simulation_last_record_json(sim);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        fgkd_string_free(json);
        assert!(text.contains("\"round\":3"), "{text}");

        let d = fgkd_simulation_param_count(sim);
        assert_eq!(d, 2 * 8 + 8 + 8 * 4 + 4);
        let mut params = vec![0.0; d];
        assert_eq!(fgkd_simulation_copy_params(sim, params.as_mut_ptr(), d - 1), FgkdStatus::BufferTooSmall);
        assert_eq!(fgkd_simulation_copy_params(sim, params.as_mut_ptr(), d), FgkdStatus::Ok);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.fgkd").to_str().unwrap()).unwrap();
        assert_eq!(fgkd_simulation_save_checkpoint(sim, path.as_ptr()), FgkdStatus::Ok);
        fgkd_simulation_free(sim);

        let mut model = ptr::null_mut();
        assert_eq!(fgkd_model_load(path.as_ptr(), FgkdActivation::Relu, &mut model), FgkdStatus::Ok);
        assert_eq!(fgkd_model_input_width(model), 2);
        assert_eq!(fgkd_model_num_classes(model), 4);
        let x = [1.0, 1.0, -1.0, -1.0];
        let mut probs = [0.0; 8];
        assert_eq!(fgkd_model_predict_proba(model, x.as_ptr(), 2, probs.as_mut_ptr(), 8), FgkdStatus::Ok);
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(fgkd_model_predict_proba(model, x.as_ptr(), 2, probs.as_mut_ptr(), 7), FgkdStatus::BufferTooSmall);
        fgkd_model_free(model);
    }
}

#[test]
fn same_config_gives_same_parameters() {
    let run = || {
        let sim = new_sim(SMALL_RUN);
        unsafe {
            for _ in 0..2 {
                assert_eq!(fgkd_simulation_run_round(sim, ptr::null_mut()), FgkdStatus::Ok);
            }
            let mut w = vec![0.0; fgkd_simulation_param_count(sim)];
            assert_eq!(fgkd_simulation_copy_params(sim, w.as_mut_ptr(), w.len()), FgkdStatus::Ok);
            fgkd_simulation_free(sim);
            w
        }
    };
    assert_eq!(run(), run());
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut sim = ptr::null_mut();
        assert_eq!(fgkd_simulation_new(ptr::null(), ptr::null(), &mut sim), FgkdStatus::NullPointer);
        assert!(sim.is_null());

        let bad = CString::new("strategy = \"fedgkd\"\nbogus_key = 1\n").unwrap();
        assert_eq!(fgkd_simulation_new(bad.as_ptr(), ptr::null(), &mut sim), FgkdStatus::Config);
        assert!(last_error().contains("bogus_key"), "{}", last_error());

        let invalid_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            fgkd_simulation_new(invalid_utf8.as_ptr().cast(), ptr::null(), &mut sim),
            FgkdStatus::InvalidUtf8
        );

        let missing = CString::new("/nonexistent/model.fgkd").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(fgkd_model_load(missing.as_ptr(), FgkdActivation::Relu, &mut model), FgkdStatus::Io);
        assert!(model.is_null());

        assert_eq!(fgkd_simulation_run_round(ptr::null_mut(), ptr::null_mut()), FgkdStatus::NullPointer);
        assert_eq!(fgkd_simulation_param_count(ptr::null()), 0);
        fgkd_simulation_free(ptr::null_mut());
        fgkd_model_free(ptr::null_mut());
        fgkd_string_free(ptr::null_mut());
    }
}

#[test]
fn pure_math_entry_points() {
    unsafe {
        let p = [0.5, 0.25, 0.25];
        let q = [0.25, 0.5, 0.25];
        let mut kl = -1.0;
        assert_eq!(fgkd_kl_div(p.as_ptr(), q.as_ptr(), 3, &mut kl), FgkdStatus::Ok);
        let expected = 0.5 * (2.0f64).ln() + 0.25 * (0.5f64).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert_eq!(fgkd_kl_div(p.as_ptr(), p.as_ptr(), 3, &mut kl), FgkdStatus::Ok);
        assert_eq!(kl, 0.0);

        let logits = [1000.0, 1000.0];
        let mut probs = [0.0; 2];
        assert_eq!(fgkd_softmax(logits.as_ptr(), 2, probs.as_mut_ptr()), FgkdStatus::Ok);
        assert_eq!(probs, [0.5, 0.5]);
        let nan = [f64::NAN, 0.0];
        assert_eq!(fgkd_softmax(nan.as_ptr(), 2, probs.as_mut_ptr()), FgkdStatus::NonFinite);

        let losses = [0.3, 0.3, 0.3];
        let mut g = [0.0; 3];
        assert_eq!(fgkd_vote_coefficients(losses.as_ptr(), 3, 0.1, 0.2, g.as_mut_ptr()), FgkdStatus::Ok);
        assert!((g.iter().sum::<f64>() - 0.2).abs() < 1e-12);
        assert!(g.iter().all(|&v| v == g[0]));
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(fgkd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fedgkd.h")).unwrap();
    for symbol in [
        "FGKD_STATUS_BUFFER_TOO_SMALL",
        "typedef struct FgkdSimulation FgkdSimulation",
        "fgkd_simulation_new",
        "fgkd_model_predict_proba",
        "fgkd_vote_coefficients",
        "fgkd_last_error_message",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}

#[test]
fn header_compiles_as_c99() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"fedgkd.h\"\nint main(void) { return fgkd_version() == 0; }\n").unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
