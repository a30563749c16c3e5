#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "hyperloop/checkpoint.hpp"
#include "hyperloop/error.hpp"
#include "hyperloop/train.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Writes a deterministic synthetic byte corpus", "make_corpus"};
  std::size_t bytes = 1 << 20;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--bytes", bytes, "Corpus size in bytes");
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--out", out, "Output file")->required();
  CLI11_PARSE(app, argc, argv);
  try {
    const auto corpus = hyperloop::generate_corpus(bytes, seed);
    hyperloop::write_file(out, corpus);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  }
  return 0;
}
