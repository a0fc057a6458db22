fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(mlsa4rec::cli::cli_main(&args));
}
