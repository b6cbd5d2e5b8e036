fn main() {
    std::process::exit(rgbd_cli::app::main_with_args(std::env::args_os()));
}
