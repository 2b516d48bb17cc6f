fn main() -> std::process::ExitCode {
    finegrain::cli::main()
}
