fn main() {
    std::process::exit(clf_opt::cli::run(std::env::args_os()));
}
