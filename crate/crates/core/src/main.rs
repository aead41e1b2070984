fn main() -> std::process::ExitCode {
    cqkd::cli::main()
}
