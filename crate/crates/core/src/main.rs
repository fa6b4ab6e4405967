fn main() {
    std::process::exit(veh_core::cli::run(std::env::args_os()));
}
