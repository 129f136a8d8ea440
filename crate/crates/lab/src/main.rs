fn main() -> std::process::ExitCode {
    enclab::cli::main()
}
