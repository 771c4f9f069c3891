fn main() {
    std::process::exit(multiview_ssl::cli::main());
}
