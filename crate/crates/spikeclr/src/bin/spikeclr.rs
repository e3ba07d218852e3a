fn main() -> ! {
    spikeclr::cli::main()
}
