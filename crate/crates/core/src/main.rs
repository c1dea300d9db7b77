fn main() {
    std::process::exit(surfel_gi::cli::dispatch(std::env::args_os()));
}
