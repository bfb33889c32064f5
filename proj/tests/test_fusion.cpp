#include <catch2/catch_amalgamated.hpp>
#include "gemgate/gemgate.hpp"
TEST_CASE("placeholder test_fusion") { CHECK(true); }
