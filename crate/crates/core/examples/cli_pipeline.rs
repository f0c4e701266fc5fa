//! The command-line pipeline driven in-process: synthesize, fit, evaluate and
//! report. Equivalent to running the `quadfit` binary with the same arguments.

use quadfit::cli::run;

fn main() {
    let dir = std::env::temp_dir().join("quadfit-example-cli");
    let _ = std::fs::remove_dir_all(&dir);
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--gait".into(), "walk".into(), "--frames".into(), "12".into(), "--out".into(), p("seq")],
        vec!["fit".into(), p("seq"), "--model".into(), "toy".into(), "--iters".into(), "100".into()],
        vec!["eval".into(), p("seq"), "--pred".into(), p("seq/fit/pose.json"), "--label".into(), "fit".into(), "--out".into(), p("eval")],
        vec!["spectrogram".into(), p("seq/audio.wav"), "--out".into(), p("spec")],
        vec!["report".into(), p("eval"), p("seq/fit"), "--out".into(), p("report")],
    ];
    for args in steps {
        println!("$ quadfit {}", args.join(" "));
        let code = run(std::iter::once("quadfit".to_string()).chain(args));
        assert_eq!(code, 0, "command failed");
    }
    println!("artifacts under {}", dir.display());
}
