fn main() -> std::process::ExitCode {
    vllsa::cli::main()
}
