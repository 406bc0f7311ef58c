fn main() {
    cabkws::cli::run();
}
