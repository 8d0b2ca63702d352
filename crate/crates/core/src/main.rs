fn main() {
    if let Some(n) = std::env::var("FF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    std::process::exit(flamefinder::cli::run(std::env::args_os()));
}
