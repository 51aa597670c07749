fn main() {
    std::process::exit(cartridge_lab::cli::dispatch(std::env::args_os()));
}
