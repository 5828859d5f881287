fn main() {
    std::process::exit(nlsf_cnn::cli::run(std::env::args_os()));
}
