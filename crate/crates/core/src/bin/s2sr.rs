fn main() -> std::process::ExitCode {
    s2sr::cli::main()
}
