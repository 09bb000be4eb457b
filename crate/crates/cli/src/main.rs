fn main() {
    std::process::exit(simi_sfx::run_main(std::env::args_os()));
}
