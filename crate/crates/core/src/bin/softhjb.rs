fn main() -> std::process::ExitCode {
    softhjb::cli::main()
}
